fn main() {
    std::process::exit(lobcast::run());
}
