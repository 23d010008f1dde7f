fn main() {
    std::process::exit(xsim::cli::cli_main(std::env::args_os()));
}
