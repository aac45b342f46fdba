fn main() {
    std::process::exit(stackseg::cli::dispatch(std::env::args_os()));
}
