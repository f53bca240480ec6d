fn main() {
    std::process::exit(sfset::cli::run());
}
