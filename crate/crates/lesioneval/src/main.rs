fn main() {
    std::process::exit(lesioneval::cli::run());
}
