fn main() {
    std::process::exit(apsql_core::cli::main());
}
