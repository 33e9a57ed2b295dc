fn main() {
    std::process::exit(pgs::cli::run());
}
