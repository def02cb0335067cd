fn main() {
    std::process::exit(dpft_harness::cli::main_with(std::env::args_os()));
}
