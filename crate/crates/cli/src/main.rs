fn main() {
    std::process::exit(grasp_cli::run(std::env::args_os()));
}
