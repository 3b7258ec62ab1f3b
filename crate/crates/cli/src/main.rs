fn main() {
    std::process::exit(hpl_cli::run(std::env::args_os()));
}
