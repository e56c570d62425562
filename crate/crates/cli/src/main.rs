fn main() {
    std::process::exit(massweights_cli::run(std::env::args_os()));
}
