fn main() {
    std::process::exit(unrealnas_cli::run());
}
