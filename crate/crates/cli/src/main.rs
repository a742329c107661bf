fn main() {
    std::process::exit(geoflow_cli::run(std::env::args_os()));
}
