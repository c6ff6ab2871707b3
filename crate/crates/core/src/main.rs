fn main() {
    std::process::exit(bags::cli::main());
}
