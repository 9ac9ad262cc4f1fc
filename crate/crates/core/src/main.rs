fn main() {
    std::process::exit(cinesync::cli::run(std::env::args()));
}
