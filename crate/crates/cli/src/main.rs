fn main() {
    std::process::exit(ecm_sphere_cli::run(std::env::args_os()));
}
