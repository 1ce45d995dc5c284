fn main() -> std::process::ExitCode {
    songgraph::cli::main()
}
