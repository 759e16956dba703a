fn main() {
    std::process::exit(v2lab::cli::main());
}
