fn main() {
    std::process::exit(entangle_core::harness::cli::run(std::env::args_os()));
}
