fn main() {
    std::process::exit(hydrohom::cli::main_with_args(std::env::args_os()));
}
