fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(v) = std::env::var("FLOWCON_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("could not size the thread pool: {e}");
                }
            }
            _ => {
                eprintln!("error: FLOWCON_THREADS must be a positive integer, got {v:?}");
                std::process::exit(2);
            }
        }
    }
    std::process::exit(flowcon_cli::run(std::env::args_os()));
}
