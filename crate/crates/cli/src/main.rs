fn main() {
    std::process::exit(simcull::run(std::env::args_os()));
}
