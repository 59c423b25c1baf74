fn main() {
    std::process::exit(tunnelshock::cli::run(std::env::args_os()));
}
