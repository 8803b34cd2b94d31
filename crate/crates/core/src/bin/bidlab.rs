fn main() {
    std::process::exit(bidlab_core::harness::cli_run(std::env::args_os()));
}
