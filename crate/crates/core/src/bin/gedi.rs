fn main() {
    std::process::exit(gedi_core::cli::run(std::env::args_os()));
}
