fn main() -> std::process::ExitCode {
    gcm_core::cli::main_with_args(std::env::args_os())
}
