fn main() -> std::process::ExitCode {
    fairpen::cli::main()
}
