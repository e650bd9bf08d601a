fn main() {
    std::process::exit(m2mclip::cli::main_from_env());
}
