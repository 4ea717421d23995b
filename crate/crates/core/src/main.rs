fn main() {
    let code = lookahead_lab::cli::run(std::env::args());
    std::process::exit(code);
}
