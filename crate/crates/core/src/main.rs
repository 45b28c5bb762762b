fn main() {
    std::process::exit(fairshare::cli::run(std::env::args_os()));
}
