fn main() {
    std::process::exit(bravl::cli::dispatch(std::env::args_os()));
}
