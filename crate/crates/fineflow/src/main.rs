fn main() {
    std::process::exit(fineflow::cli::run(std::env::args_os()));
}
