fn main() {
    std::process::exit(wnnm_normals::cli::run(std::env::args_os()));
}
