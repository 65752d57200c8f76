fn main() -> std::process::ExitCode {
    wssamnet::cli::main()
}
