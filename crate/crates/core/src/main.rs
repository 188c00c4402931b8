fn main() {
    let env = env_logger::Env::new().filter_or("CBART_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
    std::process::exit(cbart::cli::run(std::env::args_os()));
}
