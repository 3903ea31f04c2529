fn main() {
    std::process::exit(energy_policy::cli::run(std::env::args_os()));
}
