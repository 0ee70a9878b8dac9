fn main() {
    std::process::exit(selattn::cli::main_from(std::env::args_os()));
}
