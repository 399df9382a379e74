fn main() {
    std::process::exit(g4ds_cli::run(std::env::args_os()));
}
