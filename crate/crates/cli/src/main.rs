fn main() {
    std::process::exit(asvlab_cli::run(std::env::args_os()));
}
