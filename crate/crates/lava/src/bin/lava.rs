fn main() {
    std::process::exit(lava::cli::run_cli(std::env::args()));
}
