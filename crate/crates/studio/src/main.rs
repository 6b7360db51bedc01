use std::net::SocketAddr;
use std::sync::Arc;

use anyhow::{Context, Result};
use slgan_studio::{router, LoadedBundle, Studio, StudioConfig};

#[tokio::main]
async fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = StudioConfig::from_env()?;
    let bundle = match &cfg.bundle {
        Some(p) => {
            let b = LoadedBundle::load(p).with_context(|| format!("loading {}", p.display()))?;
            log::info!("loaded {} (step {}, sha256 {})", p.display(), b.step, b.hash);
            Some(b)
        }
        None => {
            log::warn!("SLGAN_BUNDLE is not set; inference endpoints answer 503");
            None
        }
    };
    let studio = Arc::new(Studio::new(bundle, cfg.session_ttl));
    let app = router(studio, cfg.body_limit, cfg.origin.as_deref());
    let addr = SocketAddr::from(([0, 0, 0, 0], cfg.port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    log::info!("listening on http://{addr}");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
