fn main() {
    std::process::exit(jagged_cp::harness::run_cli(std::env::args_os()));
}
