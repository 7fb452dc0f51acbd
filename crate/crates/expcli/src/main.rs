fn main() {
    std::process::exit(fedsim_expcli::cli::main_with_args(std::env::args_os()));
}
