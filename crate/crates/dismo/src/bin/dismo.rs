fn main() {
    env_logger::init();
    std::process::exit(dismo::cli::run());
}
