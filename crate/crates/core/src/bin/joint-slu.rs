fn main() {
    std::process::exit(joint_slu::cli::main_with_args(std::env::args_os()));
}
