fn main() -> std::process::ExitCode {
    feddag::cli::main()
}
