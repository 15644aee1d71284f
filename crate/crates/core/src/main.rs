fn main() {
    std::process::exit(multisource_nmt::cli::main_with(std::env::args_os()));
}
