fn main() {
    std::process::exit(priortrack::cli::run(std::env::args_os()));
}
