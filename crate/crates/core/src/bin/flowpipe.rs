fn main() {
    std::process::exit(flowpipe::cli::main_with(std::env::args_os()));
}
