fn main() -> std::process::ExitCode {
    disambig::cli::main()
}
