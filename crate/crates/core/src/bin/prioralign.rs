fn main() {
    std::process::exit(prioralign::cli::run(std::env::args_os()));
}
