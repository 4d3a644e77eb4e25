fn main() {
    std::process::exit(dpm_cli::run(std::env::args_os()));
}
