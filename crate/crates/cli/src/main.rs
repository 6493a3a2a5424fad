fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(tinyasc_cli::run(&argv));
}
