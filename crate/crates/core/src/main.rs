fn main() {
    std::process::exit(vsg_hdp::cli::main_from(std::env::args_os()));
}
