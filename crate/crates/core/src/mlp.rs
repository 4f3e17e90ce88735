//! Small fully connected feedforward network with exact reverse-mode gradients.
//!
//! Hidden layers use one activation (tanh by default), the output layer
//! another (linear by default). Gradients are available with respect to the
//! parameters and the input vector.
//!
//! # Text format
//!
//! ```text
//! mlp 7 8 8 1
//! activation tanh linear
//! <out rows of `in` weights, one row per line>
//! <one line of `out` biases>
//! ...repeated per layer
//! ```
//!
//! Values are written with 17 significant digits so that reading a file back
//! reproduces every `f64` exactly.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the activation value `a = f(z)`.
    fn derivative<T: Real>(self, a: T) -> T {
        match self {
            Activation::Tanh => T::one() - a * a,
            Activation::Linear => T::one(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Linear => "linear",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "linear" => Ok(Activation::Linear),
            other => Err(Error::Parse(format!("unknown activation `{other}`"))),
        }
    }
}

/// Dense layer `y = W·x + b`, `W` stored row-major (`outputs × inputs`).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<T>,
    pub biases: Vec<T>,
}

impl<T: Real> Layer<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![T::zero(); inputs * outputs],
            biases: vec![T::zero(); outputs],
        }
    }

    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> T {
        self.weights[row * self.inputs + col]
    }

    fn affine(&self, x: &[T]) -> Vec<T> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.biases)
            .map(|(row, &b)| row.iter().zip(x).fold(b, |acc, (&w, &xi)| acc + w * xi))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<Layer<T>>,
    hidden: Activation,
    output: Activation,
}

/// Values recorded by [`Mlp::forward`]; `activations[0]` is the input and
/// `activations[i + 1]` the output of layer `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache<T> {
    pub pre_activations: Vec<Vec<T>>,
    pub activations: Vec<Vec<T>>,
}

impl<T: Real> ForwardCache<T> {
    pub fn output(&self) -> &[T] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Gradient with the same shape as an [`Mlp`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGrad<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> WeightGrad<T> {
    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|g| g.is_zero()))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|g| g.is_finite()))
    }

    /// Flattened in the same order as [`Mlp::params`].
    pub fn flatten(&self) -> Vec<T> {
        flatten_layers(&self.layers)
    }
}

fn flatten_layers<T: Real>(layers: &[Layer<T>]) -> Vec<T> {
    layers
        .iter()
        .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
        .collect()
}

impl<T: Real> Mlp<T> {
    /// Network with every parameter zero.
    pub fn zeros(sizes: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        check_sizes(sizes)?;
        let layers = sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Ok(Self {
            layers,
            hidden,
            output,
        })
    }

    /// Uniform Glorot initialisation, `w ~ U[−a, a]` with
    /// `a = sqrt(6/(fan_in + fan_out))`; biases zero.
    pub fn init_random(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(sizes, &mut rng)
    }

    pub fn init_with_rng<R: Rng>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes, Activation::Tanh, Activation::Linear)?;
        for layer in &mut net.layers {
            let bound = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.weights {
                *w = T::lit(rng.random_range(-bound..=bound));
            }
        }
        Ok(net)
    }

    /// Builds a network from explicit layers.
    pub fn from_layers(layers: Vec<Layer<T>>, hidden: Activation, output: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Parameter("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.inputs == 0 || l.outputs == 0 {
                return Err(Error::Parameter(format!("layer {i} has a zero dimension")));
            }
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(Error::Parameter(format!("layer {i} storage does not match its shape")));
            }
        }
        for w in layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(Error::Dimension {
                    context: "layer chain",
                    expected: w[0].outputs,
                    got: w[1].inputs,
                });
            }
        }
        Ok(Self {
            layers,
            hidden,
            output,
        })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn activations(&self) -> (Activation, Activation) {
        (self.hidden, self.output)
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_size(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// All parameters, layer by layer, weights (row-major) before biases.
    pub fn params(&self) -> Vec<T> {
        flatten_layers(&self.layers)
    }

    /// Inverse of [`Mlp::params`].
    pub fn set_params(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Dimension {
                context: "set_params",
                expected: self.num_params(),
                got: values.len(),
            });
        }
        let mut it = values.iter().copied();
        for layer in &mut self.layers {
            for p in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *p = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn forward(&self, x: &[T]) -> Result<(Vec<T>, ForwardCache<T>)> {
        if x.len() != self.input_size() {
            return Err(Error::Dimension {
                context: "forward input",
                expected: self.input_size(),
                got: x.len(),
            });
        }
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let act = self.activation_of(i);
            let z = layer.affine(&activations[i]);
            let a = z.iter().map(|&zi| act.apply(zi)).collect();
            pre_activations.push(z);
            activations.push(a);
        }
        let y = activations[activations.len() - 1].clone();
        Ok((
            y,
            ForwardCache {
                pre_activations,
                activations,
            },
        ))
    }

    /// Forward pass without keeping intermediate values.
    pub fn predict(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.input_size() {
            return Err(Error::Dimension {
                context: "forward input",
                expected: self.input_size(),
                got: x.len(),
            });
        }
        let mut a = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let act = self.activation_of(i);
            a = layer.affine(&a).into_iter().map(|z| act.apply(z)).collect();
        }
        Ok(a)
    }

    fn check_cache(&self, cache: &ForwardCache<T>, upstream: &[T]) -> Result<()> {
        let sizes = self.sizes();
        let consistent = cache.activations.len() == sizes.len()
            && cache.pre_activations.len() == self.layers.len()
            && cache.activations.iter().zip(&sizes).all(|(a, &n)| a.len() == n);
        if !consistent {
            return Err(Error::Parameter("forward cache does not match network topology".into()));
        }
        if upstream.len() != self.output_size() {
            return Err(Error::Dimension {
                context: "upstream gradient",
                expected: self.output_size(),
                got: upstream.len(),
            });
        }
        Ok(())
    }

    /// Reverse pass for the scalar `upstream · y`: gradients with respect to
    /// every parameter and to the input.
    pub fn backward(&self, cache: &ForwardCache<T>, upstream: &[T]) -> Result<(WeightGrad<T>, Vec<T>)> {
        self.check_cache(cache, upstream)?;
        let mut grads: Vec<Layer<T>> = Vec::with_capacity(self.layers.len());
        let mut delta_out: Vec<T> = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let act = self.activation_of(i);
            let delta: Vec<T> = delta_out
                .iter()
                .zip(&cache.activations[i + 1])
                .map(|(&d, &a)| d * act.derivative(a))
                .collect();
            let input = &cache.activations[i];
            let mut g = Layer::zeros(layer.inputs, layer.outputs);
            for (r, &d) in delta.iter().enumerate() {
                g.biases[r] = d;
                let row = &mut g.weights[r * layer.inputs..(r + 1) * layer.inputs];
                for (gw, &xi) in row.iter_mut().zip(input) {
                    *gw = d * xi;
                }
            }
            let mut delta_in = vec![T::zero(); layer.inputs];
            for (r, &d) in delta.iter().enumerate() {
                for (c, di) in delta_in.iter_mut().enumerate() {
                    *di += layer.weight(r, c) * d;
                }
            }
            grads.push(g);
            delta_out = delta_in;
        }
        grads.reverse();
        Ok((WeightGrad { layers: grads }, delta_out))
    }

    pub fn grad_weights(&self, cache: &ForwardCache<T>, upstream: &[T]) -> Result<WeightGrad<T>> {
        self.backward(cache, upstream).map(|(g, _)| g)
    }

    pub fn grad_input(&self, cache: &ForwardCache<T>, upstream: &[T]) -> Result<Vec<T>> {
        self.backward(cache, upstream).map(|(_, g)| g)
    }

    fn check_grad_shape(&self, grad: &WeightGrad<T>) -> Result<()> {
        let congruent = grad.layers.len() == self.layers.len()
            && grad.layers.iter().zip(&self.layers).all(|(g, l)| {
                g.inputs == l.inputs
                    && g.outputs == l.outputs
                    && g.weights.len() == l.weights.len()
                    && g.biases.len() == l.biases.len()
            });
        if congruent {
            Ok(())
        } else {
            Err(Error::Parameter("gradient shape does not match network".into()))
        }
    }

    /// `p ← p + step·g` for every parameter.
    pub fn update_in_place(&mut self, grad: &WeightGrad<T>, step: T) -> Result<()> {
        self.check_grad_shape(grad)?;
        for (layer, g) in self.layers.iter_mut().zip(&grad.layers) {
            for (p, &gp) in layer.weights.iter_mut().zip(&g.weights) {
                *p += step * gp;
            }
            for (p, &gp) in layer.biases.iter_mut().zip(&g.biases) {
                *p += step * gp;
            }
        }
        Ok(())
    }

    pub fn apply_update(&self, grad: &WeightGrad<T>, step: T) -> Result<Self> {
        let mut next = self.clone();
        next.update_in_place(grad, step)?;
        Ok(next)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|p| p.is_finite()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let sizes: Vec<String> = self.sizes().iter().map(usize::to_string).collect();
        let _ = writeln!(out, "mlp {}", sizes.join(" "));
        let _ = writeln!(out, "activation {} {}", self.hidden.name(), self.output.name());
        for layer in &self.layers {
            for row in layer.weights.chunks_exact(layer.inputs) {
                let _ = writeln!(out, "{}", join_exact(row));
            }
            let _ = writeln!(out, "{}", join_exact(&layer.biases));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::Parse("empty network file".into()))?;
        let mut head = header.split_whitespace();
        if head.next() != Some("mlp") {
            return Err(Error::Parse(format!("expected `mlp` header, got `{header}`")));
        }
        let sizes = head
            .map(|s| s.parse::<usize>().map_err(|e| Error::Parse(format!("layer size `{s}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        check_sizes(&sizes).map_err(|e| Error::Parse(e.to_string()))?;

        let act_line = lines.next().ok_or_else(|| Error::Parse("missing activation line".into()))?;
        let acts: Vec<&str> = act_line.split_whitespace().collect();
        if acts.len() != 3 || acts[0] != "activation" {
            return Err(Error::Parse(format!("bad activation line `{act_line}`")));
        }
        let hidden = Activation::parse(acts[1])?;
        let output = Activation::parse(acts[2])?;

        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (li, w) in sizes.windows(2).enumerate() {
            let (inputs, outputs) = (w[0], w[1]);
            let mut layer = Layer::zeros(inputs, outputs);
            for r in 0..outputs {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::Parse(format!("layer {li}: missing weight row {r}")))?;
                let row = parse_row(line, inputs, li)?;
                layer.weights[r * inputs..(r + 1) * inputs].copy_from_slice(&row);
            }
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("layer {li}: missing biases")))?;
            layer.biases = parse_row(line, outputs, li)?;
            layers.push(layer);
        }
        if let Some(extra) = lines.next() {
            return Err(Error::Parse(format!("trailing content `{extra}`")));
        }
        Self::from_layers(layers, hidden, output)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::Parameter(
            "network needs an input size and at least one layer size".into(),
        ));
    }
    if let Some(i) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::Parameter(format!("layer size {i} is zero")));
    }
    Ok(())
}

fn join_exact<T: Real>(values: &[T]) -> String {
    values
        .iter()
        .map(|v| format!("{:.16e}", v.to_f64_lossy()))
        .collect::<Vec<_>>()
        .join(" ")
}

fn parse_row<T: Real>(line: &str, expected: usize, layer: usize) -> Result<Vec<T>> {
    let row = line
        .split_whitespace()
        .map(|s| {
            s.parse::<f64>()
                .map(T::lit)
                .map_err(|e| Error::Parse(format!("layer {layer}: `{s}`: {e}")))
        })
        .collect::<Result<Vec<T>>>()?;
    if row.len() != expected {
        return Err(Error::Parse(format!(
            "layer {layer}: expected {expected} values, found {}",
            row.len()
        )));
    }
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    const TOPOLOGY: [usize; 4] = [7, 8, 8, 1];

    fn affine_net(w: f64, b: f64) -> Mlp<f64> {
        let layer = Layer {
            inputs: 1,
            outputs: 1,
            weights: vec![w],
            biases: vec![b],
        };
        Mlp::from_layers(vec![layer], Activation::Tanh, Activation::Linear).unwrap()
    }

    /// Straightforward re-implementation: explicit loops over (W, b).
    #[allow(clippy::needless_range_loop)]
    fn reference_forward(net: &Mlp<f64>, x: &[f64]) -> Vec<f64> {
        let n = net.layers().len();
        let mut a = x.to_vec();
        for (i, layer) in net.layers().iter().enumerate() {
            let mut next = vec![0.0; layer.outputs];
            for r in 0..layer.outputs {
                let mut z = layer.biases[r];
                for c in 0..layer.inputs {
                    z += layer.weights[r * layer.inputs + c] * a[c];
                }
                next[r] = if i + 1 == n { z } else { z.tanh() };
            }
            a = next;
        }
        a
    }

    fn random_input(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Mlp::<f64>::init_random(&TOPOLOGY, 11).unwrap();
        let b = Mlp::<f64>::init_random(&TOPOLOGY, 11).unwrap();
        let c = Mlp::<f64>::init_random(&TOPOLOGY, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params(), c.params());
        assert!(a.layers().iter().all(|l| l.biases.iter().all(|&b| b == 0.0)));
        let bound = (6.0f64 / 15.0).sqrt();
        assert!(a.layers()[0].weights.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn parameter_count() {
        let net = Mlp::<f64>::init_random(&TOPOLOGY, 0).unwrap();
        assert_eq!(net.num_params(), 7 * 8 + 8 + 8 * 8 + 8 + 8 + 1);
        assert_eq!(net.num_params(), 145);
        assert_eq!(net.sizes(), TOPOLOGY.to_vec());
    }

    #[test]
    fn zero_sized_layer_rejected() {
        assert!(matches!(Mlp::<f64>::init_random(&[7, 0, 1], 0), Err(Error::Parameter(_))));
        assert!(Mlp::<f64>::init_random(&[7], 0).is_err());
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::<f64>::zeros(&TOPOLOGY, Activation::Tanh, Activation::Linear).unwrap();
        let (y, _) = net.forward(&random_input(3, 7)).unwrap();
        assert_eq!(y, vec![0.0]);
    }

    #[test]
    fn affine_identity() {
        let net = affine_net(2.5, -0.75);
        let (y, _) = net.forward(&[1.2]).unwrap();
        assert_relative_eq!(y[0], 2.5 * 1.2 - 0.75, max_relative = 1e-15);
    }

    #[test]
    fn forward_matches_reference_loop() {
        for seed in 0..10 {
            let net = Mlp::<f64>::init_random(&TOPOLOGY, seed).unwrap();
            let x = random_input(seed + 100, 7);
            let (y, cache) = net.forward(&x).unwrap();
            let r = reference_forward(&net, &x);
            assert!((y[0] - r[0]).abs() <= 1e-12 * r[0].abs().max(1.0));
            assert_eq!(cache.output(), y.as_slice());
            assert_eq!(net.predict(&x).unwrap(), y);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let net = Mlp::<f64>::init_random(&TOPOLOGY, 0).unwrap();
        assert!(matches!(net.forward(&[0.0; 6]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn hidden_activations_bounded() {
        let net = Mlp::<f64>::init_random(&TOPOLOGY, 5).unwrap();
        let (_, cache) = net.forward(&[50.0, -40.0, 3.0, 9.0, -7.0, 1.0, 100.0]).unwrap();
        for a in &cache.activations[1..3] {
            assert!(a.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = Mlp::<f64>::init_random(&TOPOLOGY, 2).unwrap();
        let (_, cache) = net.forward(&random_input(9, 7)).unwrap();
        assert!(net.grad_weights(&cache, &[0.0]).unwrap().is_zero());
        assert!(net.grad_input(&cache, &[0.0]).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn affine_derivatives() {
        let net = affine_net(-1.5, 0.3);
        let (_, cache) = net.forward(&[0.7]).unwrap();
        let g = net.grad_weights(&cache, &[1.0]).unwrap();
        assert_eq!(g.layers[0].weights, vec![0.7]);
        assert_eq!(g.layers[0].biases, vec![1.0]);
        assert_eq!(net.grad_input(&cache, &[1.0]).unwrap(), vec![-1.5]);
    }

    #[test]
    fn zero_weights_zero_input_gradient() {
        let net = Mlp::<f64>::zeros(&TOPOLOGY, Activation::Tanh, Activation::Linear).unwrap();
        let (_, cache) = net.forward(&random_input(4, 7)).unwrap();
        assert!(net.grad_input(&cache, &[1.0]).unwrap().iter().all(|g| *g == 0.0));
    }

    /// Fourth-order central difference of `f` at `x`.
    fn central_difference(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-3 * x.abs().max(1.0);
        (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
    }

    #[test]
    fn gradients_match_central_differences() {
        for seed in 0..5 {
            let net = Mlp::<f64>::init_random(&TOPOLOGY, seed).unwrap();
            let x = random_input(seed + 50, 7);
            let (_, cache) = net.forward(&x).unwrap();
            let (gw, gx) = net.backward(&cache, &[1.0]).unwrap();
            let analytic = gw.flatten();
            let params = net.params();
            for (i, &p) in params.iter().enumerate() {
                let fd = central_difference(
                    |v| {
                        let mut probe = net.clone();
                        let mut values = params.clone();
                        values[i] = v;
                        probe.set_params(&values).unwrap();
                        probe.predict(&x).unwrap()[0]
                    },
                    p,
                );
                assert!(rel_err(analytic[i], fd) < 1e-6, "param {i}: {} vs {fd}", analytic[i]);
            }
            for j in 0..7 {
                let fd = central_difference(
                    |v| {
                        let mut probe = x.clone();
                        probe[j] = v;
                        net.predict(&probe).unwrap()[0]
                    },
                    x[j],
                );
                assert!(rel_err(gx[j], fd) < 1e-6, "input {j}: {} vs {fd}", gx[j]);
            }
        }
    }

    #[test]
    fn update_step_zero_is_identity() {
        let net = Mlp::<f64>::init_random(&TOPOLOGY, 1).unwrap();
        let (_, cache) = net.forward(&random_input(1, 7)).unwrap();
        let g = net.grad_weights(&cache, &[1.0]).unwrap();
        assert_eq!(net.apply_update(&g, 0.0).unwrap(), net);
    }

    #[test]
    fn update_is_linear_and_invertible() {
        let net = Mlp::<f64>::init_random(&TOPOLOGY, 8).unwrap();
        let (_, cache) = net.forward(&random_input(8, 7)).unwrap();
        let g = net.grad_weights(&cache, &[1.0]).unwrap();
        let two = net.apply_update(&g, 0.25).unwrap().apply_update(&g, 0.5).unwrap();
        let one = net.apply_update(&g, 0.75).unwrap();
        for (a, b) in two.params().iter().zip(one.params()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
        let back = net.apply_update(&g, -1.0).unwrap().apply_update(&g, 1.0).unwrap();
        for (a, b) in back.params().iter().zip(net.params()) {
            assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
        }
    }

    #[test]
    fn update_rejects_mismatched_gradient() {
        let net = Mlp::<f64>::init_random(&TOPOLOGY, 1).unwrap();
        let other = Mlp::<f64>::init_random(&[6, 8, 8, 1], 1).unwrap();
        let (_, cache) = other.forward(&[0.0; 6]).unwrap();
        let g = other.grad_weights(&cache, &[1.0]).unwrap();
        assert!(net.apply_update(&g, 1.0).is_err());
        assert!(net.grad_weights(&cache, &[1.0]).is_err());
    }

    #[test]
    fn text_format_rejects_garbage() {
        assert!(Mlp::<f64>::from_text("").is_err());
        assert!(Mlp::<f64>::from_text("mlp 1 1\nactivation tanh linear\n1.0\n").is_err());
        assert!(Mlp::<f64>::from_text("mlp 1 1\nactivation relu linear\n1.0\n0.0\n").is_err());
        assert!(Mlp::<f64>::from_text("mlp 1 1\nactivation tanh linear\n1.0 2.0\n0.0\n").is_err());
        let ok = Mlp::<f64>::from_text("mlp 1 1\nactivation tanh linear\n1.0\n0.0\n").unwrap();
        assert_eq!(ok, affine_net(1.0, 0.0));
    }

    proptest! {
        #[test]
        fn text_round_trip_is_exact(seed in any::<u64>(), scale in -1e3f64..1e3) {
            let mut net = Mlp::<f64>::init_random(&TOPOLOGY, seed).unwrap();
            let v: Vec<f64> = net.params().iter().map(|p| p * scale / 3.0).collect();
            net.set_params(&v).unwrap();
            let back = Mlp::<f64>::from_text(&net.to_text()).unwrap();
            prop_assert_eq!(back, net);
        }

        #[test]
        fn forward_is_bitwise_deterministic(seed in any::<u64>(), x in proptest::collection::vec(-5.0f64..5.0, 7)) {
            let net = Mlp::<f64>::init_random(&TOPOLOGY, seed).unwrap();
            let a = net.forward(&x).unwrap().0;
            let b = net.forward(&x).unwrap().0;
            prop_assert_eq!(a[0].to_bits(), b[0].to_bits());
        }
    }
}
