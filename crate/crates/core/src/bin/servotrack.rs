fn main() {
    std::process::exit(servotrack::cli::run(std::env::args_os()));
}
