fn main() {
    std::process::exit(stonecrack_cli::main_with(std::env::args_os()));
}
