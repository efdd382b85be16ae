fn main() {
    std::process::exit(vigil::cli::dispatch(std::env::args_os()));
}
