fn main() {
    std::process::exit(grpo_dynamics::cli::main_with_args(std::env::args_os()));
}
