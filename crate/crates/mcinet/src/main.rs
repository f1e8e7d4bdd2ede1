fn main() {
    std::process::exit(mcinet::cli::run(std::env::args_os()));
}
