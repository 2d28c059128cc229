fn main() {
    let code = cracknex::cli::run(std::env::args());
    std::process::exit(code);
}
