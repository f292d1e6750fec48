fn main() {
    std::process::exit(mpcl_core::cli::run(std::env::args_os()));
}
