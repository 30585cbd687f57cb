fn main() -> std::process::ExitCode {
    pevshape::cli::main_with_args(std::env::args_os())
}
