fn main() {
    std::process::exit(cqed_cli::run(std::env::args_os()));
}
