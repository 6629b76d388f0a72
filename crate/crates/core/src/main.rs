fn main() {
    std::process::exit(icm_gwas::cli::run(std::env::args_os()));
}
