fn main() {
    std::process::exit(dualpath_se::cli::run(std::env::args_os()));
}
