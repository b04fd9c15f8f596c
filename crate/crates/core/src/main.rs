fn main() {
    std::process::exit(soundmind::cli::run());
}
