fn main() {
    std::process::exit(lvseg::cli::run());
}
