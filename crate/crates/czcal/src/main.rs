fn main() {
    std::process::exit(czcal::cli::main_from_args(std::env::args_os()));
}
