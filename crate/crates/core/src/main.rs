fn main() {
    std::process::exit(mmd_core::cli::run(std::env::args_os()));
}
