fn main() {
    std::process::exit(subpt::cli::run_command(&std::env::args().skip(1).collect::<Vec<_>>()));
}
