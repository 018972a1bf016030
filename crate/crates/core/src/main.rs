fn main() -> std::process::ExitCode {
    tailsampler::cli::main()
}
