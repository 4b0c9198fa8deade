fn main() {
    std::process::exit(recm::cli::run());
}
