fn main() {
    std::process::exit(portrait_refine::cli::main_with_args(std::env::args()));
}
