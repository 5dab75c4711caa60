fn main() {
    std::process::exit(mist_cli::run(std::env::args_os()));
}
