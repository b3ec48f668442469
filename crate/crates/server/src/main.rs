use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use aegis_core::game::SessionConfig;
use aegis_core::provider::{ProviderConfig, ProviderMode};
use aegis_core::script::{canonical_script, load_script_file, CANONICAL_SCRIPT_ID};
use aegis_core::store::SessionStore;
use aegis_server::{router, AppState, ServiceConfig};
use clap::Parser;

/// Serves game sessions over HTTP.
#[derive(Debug, Parser)]
#[command(name = "aegis-server", version)]
struct Args {
    #[arg(long, env = "AEGIS_BIND", default_value = "127.0.0.1:8080")]
    bind: String,
    #[arg(long, env = "AEGIS_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    /// `live` or `mock:<queue file>`
    #[arg(long, env = "AEGIS_PROVIDER", default_value = "live")]
    provider: ProviderMode,
    #[arg(long, env = "AEGIS_ENDPOINT_URL")]
    endpoint_url: Option<String>,
    #[arg(long, env = "AEGIS_MODEL")]
    model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[arg(long, env = "AEGIS_API_KEY_ENV")]
    api_key_env: Option<String>,
    #[arg(long)]
    temperature: Option<f32>,
    #[arg(long)]
    max_retries: Option<u8>,
    #[arg(long)]
    timeout_secs: Option<u64>,
    /// Max non-system messages sent per request.
    #[arg(long)]
    history_cap: Option<usize>,
    /// Idle sessions leave memory after this many seconds.
    #[arg(long, default_value_t = 24 * 60 * 60)]
    session_ttl_secs: u64,
    /// Extra scripts, registered under their file stem.
    #[arg(long = "script")]
    scripts: Vec<PathBuf>,
    /// Built web client to serve at `/`.
    #[arg(long, env = "AEGIS_STATIC_DIR")]
    static_dir: Option<PathBuf>,
}

fn provider_config(args: &Args) -> ProviderConfig {
    let mut c = ProviderConfig::default();
    if let Some(v) = &args.endpoint_url {
        c.endpoint_url = v.clone();
    }
    if let Some(v) = &args.model {
        c.model_name = v.clone();
    }
    if let Some(v) = &args.api_key_env {
        c.api_key_env = v.clone();
    }
    if let Some(v) = args.temperature {
        c.temperature = v;
    }
    if let Some(v) = args.max_retries {
        c.max_retries = v;
    }
    if let Some(v) = args.timeout_secs {
        c.timeout = Duration::from_secs(v);
    }
    if args.provider.is_mock() {
        c.backoff_base = Duration::ZERO;
    }
    c
}

async fn run(args: Args) -> Result<(), String> {
    let provider_config = provider_config(&args);
    provider_config.validate().map_err(|e| e.to_string())?;
    let provider = args
        .provider
        .build()
        .map_err(|e| format!("cannot load provider: {e}"))?;

    let mut scripts = BTreeMap::new();
    scripts.insert(CANONICAL_SCRIPT_ID.to_string(), Arc::new(canonical_script()));
    for path in &args.scripts {
        let script = load_script_file(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| format!("{}: bad file name", path.display()))?;
        scripts.insert(id.to_string(), Arc::new(script));
    }

    let store = Arc::new(SessionStore::open(&args.data_dir).map_err(|e| e.to_string())?);
    let config = ServiceConfig {
        session: SessionConfig {
            provider: provider_config,
            history_cap: args.history_cap,
        },
        session_ttl: Duration::from_secs(args.session_ttl_secs),
        static_dir: args.static_dir.clone(),
        ..ServiceConfig::default()
    };
    let app = AppState::new(store, scripts, provider, config);
    app.spawn_evictor();

    let listener = tokio::net::TcpListener::bind(&args.bind)
        .await
        .map_err(|e| format!("cannot bind {}: {e}", args.bind))?;
    eprintln!("listening on http://{}", listener.local_addr().map_err(|e| e.to_string())?);
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| e.to_string())
}

#[tokio::main]
async fn main() -> ExitCode {
    match run(Args::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
