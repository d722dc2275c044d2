fn main() {
    std::process::exit(panotok::cli::main_with(std::env::args_os()));
}
