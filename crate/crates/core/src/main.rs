fn main() {
    std::process::exit(kdseg::cli::run(std::env::args_os()));
}
