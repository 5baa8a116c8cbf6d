fn main() {
    std::process::exit(aetsep::cli::run(std::env::args_os()));
}
