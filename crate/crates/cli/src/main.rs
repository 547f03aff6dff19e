fn main() {
    std::process::exit(digitwin_cli::run(std::env::args_os()));
}
