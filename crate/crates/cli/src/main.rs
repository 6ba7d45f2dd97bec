fn main() {
    std::process::exit(styletune_cli::run(std::env::args_os()));
}
