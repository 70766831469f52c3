fn main() {
    std::process::exit(vidctrl::cli::main_from(std::env::args_os()));
}
