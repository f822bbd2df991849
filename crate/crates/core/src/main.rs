fn main() {
    std::process::exit(relicl::cli::run(std::env::args_os()));
}
