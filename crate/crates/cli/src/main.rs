fn main() {
    std::process::exit(photosplat_cli::run(std::env::args_os()));
}
