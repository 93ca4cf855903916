fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let code = geocond_cli::main_with(&argv, &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
