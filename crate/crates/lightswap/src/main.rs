fn main() {
    std::process::exit(lightswap::cli::main_with(std::env::args_os()));
}
