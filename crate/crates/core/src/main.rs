fn main() {
    std::process::exit(mtl_ctc::cli::run(std::env::args_os()));
}
