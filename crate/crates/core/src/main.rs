fn main() {
    std::process::exit(safecon::scenario_io::cli_main(std::env::args_os()));
}
