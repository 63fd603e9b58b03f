fn main() {
    std::process::exit(lifelong_lcd::cli::dispatch(std::env::args_os()));
}
