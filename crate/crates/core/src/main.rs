fn main() -> std::process::ExitCode {
    rftune::cli::main_with_args(std::env::args_os())
}
