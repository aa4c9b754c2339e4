fn main() {
    std::process::exit(solo_connection::cli::run(std::env::args_os()));
}
