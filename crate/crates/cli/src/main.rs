fn main() {
    std::process::exit(xmodal_kws_cli::run_command(std::env::args_os()));
}
