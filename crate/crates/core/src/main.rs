fn main() {
    std::process::exit(weightalign::cli::main_with(std::env::args_os()));
}
