fn main() {
    std::process::exit(flowctl::cli::run(std::env::args_os()));
}
