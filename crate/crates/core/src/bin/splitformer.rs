fn main() {
    std::process::exit(splitformer::cli::main());
}
