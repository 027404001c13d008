fn main() {
    std::process::exit(gridvlp::cli_main());
}
