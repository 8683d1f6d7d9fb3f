fn main() {
    std::process::exit(bigraphdiff_cli::run(std::env::args_os()));
}
