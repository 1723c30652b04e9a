fn main() {
    std::process::exit(trigger_estimation::cli::run(std::env::args_os()));
}
