fn main() {
    std::process::exit(skelfuse_cli::dispatch(std::env::args_os()));
}
