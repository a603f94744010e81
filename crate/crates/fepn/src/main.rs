fn main() {
    std::process::exit(fepn::cli::run());
}
