fn main() {
    std::process::exit(gozone_harness::cli::main());
}
