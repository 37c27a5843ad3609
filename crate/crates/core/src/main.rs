fn main() {
    std::process::exit(rmtkl::cli::run());
}
