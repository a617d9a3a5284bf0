fn main() {
    std::process::exit(genequery_cli::main_with(std::env::args_os()));
}
