use std::process::exit;

fn main() {
    env_logger::init();
    exit(romfbk::cli::run(std::env::args_os()));
}
