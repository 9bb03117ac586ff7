fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("FXFLOW_LOG")).init();
    std::process::exit(fxflow::cli::main_with_args(std::env::args_os()) as i32);
}
