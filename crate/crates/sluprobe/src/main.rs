fn main() {
    std::process::exit(sluprobe::cli::run(std::env::args_os()));
}
