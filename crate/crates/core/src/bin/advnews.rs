fn main() -> std::process::ExitCode {
    adversarial_news::cli::main()
}
