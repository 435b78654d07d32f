fn main() {
    std::process::exit(braingat::cli::run(std::env::args_os()));
}
