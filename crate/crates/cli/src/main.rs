fn main() {
    std::process::exit(dreamstate_cli::run(std::env::args_os()));
}
