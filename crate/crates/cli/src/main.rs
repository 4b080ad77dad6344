fn main() {
    let code = spmim_cli::run(std::env::args_os());
    std::process::exit(code);
}
