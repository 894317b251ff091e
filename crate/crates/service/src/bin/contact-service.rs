use std::net::SocketAddr;

use anyhow::Context;
use clap::Parser;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(version, about = "Contact planner HTTP service")]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt().with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into())).init();
    let args = Args::parse();
    let (addr, server) = contact_service::spawn(args.addr).await.with_context(|| format!("binding {}", args.addr))?;
    tracing::info!(%addr, "listening");
    server.await?.context("server failed")?;
    Ok(())
}
