fn main() {
    std::process::exit(lmtree::cli::main());
}
