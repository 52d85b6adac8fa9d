fn main() {
    dispersim::cli::main_entry();
}
