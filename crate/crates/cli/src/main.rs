fn main() {
    std::process::exit(prosody_cli::main_with_args(std::env::args_os()));
}
