fn main() {
    std::process::exit(epigeo::cli::run(std::env::args_os()));
}
