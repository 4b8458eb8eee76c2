fn main() {
    std::process::exit(gpnd_cli::run(std::env::args_os()));
}
