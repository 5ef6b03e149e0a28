fn main() {
    std::process::exit(moelio::cli::main());
}
