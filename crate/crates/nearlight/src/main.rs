fn main() {
    std::process::exit(nearlight::cli::run());
}
