fn main() {
    std::process::exit(dymn::cli::run(std::env::args_os()));
}
