//! `pccnn-serve`: serves one checkpoint over HTTP.

use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use pccnn_service::{router, state_from_checkpoint, ServiceConfig};

#[derive(Parser, Debug)]
#[command(name = "pccnn-serve", version, about = "HTTP inference service for a pixel-constrained inpainting model")]
struct Args {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Checkpoint to serve; without it every model route answers 503.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Requests admitted at once, queued or running; more get 429.
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u32).range(1..))]
    max_queue: u32,
    /// Requests computing at once.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    workers: u32,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let config = ServiceConfig {
        max_queue: args.max_queue as usize,
        workers: args.workers as usize,
        ..ServiceConfig::default()
    };
    let state = state_from_checkpoint(args.ckpt.as_deref(), &config).context("loading checkpoint")?;
    let addr = SocketAddr::new(args.host, args.port);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
