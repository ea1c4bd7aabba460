fn main() {
    std::process::exit(kschem::cli::main_with_args(std::env::args_os()));
}
