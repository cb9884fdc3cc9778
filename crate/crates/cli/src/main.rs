fn main() {
    std::process::exit(patchfield_cli::run(std::env::args_os()));
}
