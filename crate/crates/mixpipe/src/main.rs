fn main() {
    std::process::exit(mixpipe::cli::main_with(std::env::args_os()));
}
