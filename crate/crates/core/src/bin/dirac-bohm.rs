fn main() {
    std::process::exit(dirac_bohm::cli::main_with_args(std::env::args_os()));
}
