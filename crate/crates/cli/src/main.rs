fn main() {
    std::process::exit(heatlab_cli::run(std::env::args_os()));
}
