fn main() {
    std::process::exit(fpsi::cli::run(std::env::args_os()));
}
