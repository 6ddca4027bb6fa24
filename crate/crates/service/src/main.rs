use std::net::{IpAddr, Ipv4Addr, SocketAddr};

use anyhow::Context;
use clap::Parser;
use quali_service::{router, AppState, DEFAULT_PORT};

/// Serve the analysis pipeline over HTTP on the local machine.
#[derive(Parser)]
#[command(name = "quali-serve", version)]
struct Args {
    #[arg(long, env = "QUALI_PORT", default_value_t = DEFAULT_PORT)]
    port: u16,
    /// Address to bind. Anything other than loopback exposes session data to the network.
    #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
    bind: IpAddr,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .init();
    let args = Args::parse();
    let addr = SocketAddr::new(args.bind, args.port);
    if !args.bind.is_loopback() {
        tracing::warn!(%addr, "binding to a non-loopback address");
    }
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("cannot bind {addr}"))?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, router(AppState::default()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
