fn main() {
    std::process::exit(glupruner::cli::run_cli(std::env::args()));
}
