fn main() {
    std::process::exit(clat_cli::main_with(std::env::args()));
}
