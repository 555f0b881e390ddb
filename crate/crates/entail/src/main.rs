fn main() {
    std::process::exit(entail::cli::dispatch(std::env::args_os()));
}
