fn main() {
    std::process::exit(diverid::cli::run_from(std::env::args_os()));
}
