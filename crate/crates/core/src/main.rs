fn main() {
    std::process::exit(rec2pm::cli::run(std::env::args_os()));
}
