fn main() {
    std::process::exit(lars_flows_cli::run(std::env::args_os()));
}
