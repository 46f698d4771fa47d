fn main() {
    std::process::exit(depthseg_cli::dispatch(std::env::args_os()));
}
