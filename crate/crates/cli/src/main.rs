fn main() {
    std::process::exit(dgfd_cli::run(std::env::args_os()));
}
