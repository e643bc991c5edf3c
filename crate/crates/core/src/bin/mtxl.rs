fn main() {
    mtxl::cli::init_logging();
    std::process::exit(mtxl::cli::main_with_args(std::env::args_os()));
}
