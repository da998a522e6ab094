fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    xfile::cli::init_threads();
    std::process::exit(xfile::cli::dispatch(std::env::args_os()));
}
