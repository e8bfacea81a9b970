fn main() {
    std::process::exit(orbit_langevin::cli::main_with_args(std::env::args_os()));
}
