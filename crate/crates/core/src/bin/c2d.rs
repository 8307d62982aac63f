fn main() {
    std::process::exit(count2density::cli::run_cli(std::env::args_os()));
}
