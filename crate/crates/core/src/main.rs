fn main() {
    std::process::exit(difflab::cli::main());
}
