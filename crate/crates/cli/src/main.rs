fn main() {
    std::process::exit(globalmerge_cli::run(std::env::args_os()));
}
