fn main() -> std::process::ExitCode {
    sitskit::cli::main()
}
