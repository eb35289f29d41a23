fn main() {
    usdeconv::tune_allocator();
    std::process::exit(usdeconv::cli::main_with_args(std::env::args_os()));
}
