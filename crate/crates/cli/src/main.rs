fn main() {
    std::process::exit(xmrv_cli::main_with_args(std::env::args_os()));
}
