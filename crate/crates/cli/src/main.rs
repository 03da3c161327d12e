fn main() {
    std::process::exit(protocdr_cli::run(std::env::args_os()));
}
