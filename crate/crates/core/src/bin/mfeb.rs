fn main() {
    std::process::exit(mfeb::harness::cli_main(std::env::args_os()));
}
