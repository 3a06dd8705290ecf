fn main() {
    std::process::exit(multical_core::cli::run(std::env::args_os()));
}
