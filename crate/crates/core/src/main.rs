fn main() {
    std::process::exit(xprec::cli::run(std::env::args_os()));
}
