use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use elicit_core::provider::{CompletionProvider, HttpProvider, MockProvider};
use elicit_core::questions::{default_bank, load_bank};
use elicit_core::store::{FileStore, SystemClock};
use elicit_server::config::ServerConfig;
use elicit_server::{router, Services};
use tracing::{error, info};

/// Serve guided annotation sessions over HTTP.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    /// Address to listen on, e.g. 127.0.0.1:8080.
    #[arg(long)]
    listen: Option<SocketAddr>,
    /// Directory holding one event log per session.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the built-in deterministic provider with this seed; no network access.
    #[arg(long, value_name = "SEED")]
    mock_provider: Option<u64>,
    /// JSON file of themed predefined questions.
    #[arg(long)]
    bank: Option<PathBuf>,
}

fn build(cli: Cli) -> Result<(SocketAddr, Services), String> {
    let mut config = match &cli.config {
        Some(path) => ServerConfig::load(path).map_err(|e| e.to_string())?,
        None => ServerConfig::default(),
    };
    config.listen = cli.listen.unwrap_or(config.listen);
    config.data_dir = cli.data_dir.unwrap_or(config.data_dir);
    config.bank = cli.bank.or(config.bank);

    let provider: Arc<dyn CompletionProvider> = match cli.mock_provider {
        Some(seed) => {
            info!(seed, "using the mock provider");
            if config.seed.is_none() {
                config.seed = Some(seed);
            }
            Arc::new(MockProvider::new(seed))
        }
        None => Arc::new(HttpProvider::from_env(config.provider.clone()).map_err(|e| e.to_string())?),
    };
    let bank = match &config.bank {
        Some(path) => load_bank(path).map_err(|e| format!("{}: {e}", path.display()))?,
        None => default_bank(),
    };
    let store = FileStore::open(&config.data_dir).map_err(|e| format!("{}: {e}", config.data_dir.display()))?;
    let auth_token = match &config.auth_token_env {
        Some(var) => Some(std::env::var(var).map_err(|_| format!("environment variable {var} is not set"))?),
        None => None,
    };

    let mut services = Services::new(Arc::new(store), Arc::new(SystemClock), provider, bank);
    services.ingest = config.ingest.clone();
    services.settings.prompt_budget = config.provider.prompt_budget;
    services.settings.history_budget = config.history_budget;
    if let Some(seed) = config.seed {
        services.settings.seed = seed;
        services.fixed_seed = true;
    }
    services.auth_token = auth_token;
    services.max_upload_bytes = config.max_upload_bytes;
    Ok((config.listen, services))
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let (addr, services) = match build(Cli::parse()) {
        Ok(v) => v,
        Err(e) => {
            error!("{e}");
            return ExitCode::FAILURE;
        }
    };
    let listener = match tokio::net::TcpListener::bind(addr).await {
        Ok(l) => l,
        Err(e) => {
            error!("cannot listen on {addr}: {e}");
            return ExitCode::FAILURE;
        }
    };
    info!(%addr, "listening");
    let app = router(Arc::new(services));
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
        info!("shutting down");
    };
    match axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("server error: {e}");
            ExitCode::FAILURE
        }
    }
}
