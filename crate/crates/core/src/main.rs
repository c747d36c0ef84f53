fn main() -> std::process::ExitCode {
    stemtune::cli::main()
}
