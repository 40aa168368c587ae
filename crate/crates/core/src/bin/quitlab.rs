fn main() {
    std::process::exit(quitlab::cli::run(std::env::args_os()));
}
