fn main() {
    if let Err(err) = otbump::cli::run() {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
