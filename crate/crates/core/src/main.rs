fn main() {
    std::process::exit(sinkcache::cli::cmd_run(std::env::args_os()));
}
