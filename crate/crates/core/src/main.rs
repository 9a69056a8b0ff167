fn main() {
    std::process::exit(uda_core::cli::main());
}
