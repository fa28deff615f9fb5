fn main() {
    std::process::exit(mat_cli::run(std::env::args_os()));
}
