fn main() {
    std::process::exit(ckil::cli::run_from(std::env::args_os()));
}
