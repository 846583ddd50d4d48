use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use clap::Parser;
use ctnli_mock_server::{router, Script, ServerConfig, Stats};

/// Scripted completion server for offline runs and tests.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8088")]
    listen: SocketAddr,
    /// Answer every prompt with this text instead of a prompt-hash answer.
    #[arg(long)]
    constant: Option<String>,
    /// Added latency per request, in milliseconds.
    #[arg(long, default_value_t = 0)]
    delay_ms: u64,
    /// Fail this many initial requests with --fail-status.
    #[arg(long, default_value_t = 0)]
    fail_first: usize,
    #[arg(long, default_value_t = 503)]
    fail_status: u16,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    let args = Args::parse();
    let config = ServerConfig {
        script: args.constant.map_or(Script::PromptHash, Script::Constant),
        delay: Duration::from_millis(args.delay_ms),
        fail_first: args.fail_first,
        fail_status: args.fail_status,
    };
    let listener = tokio::net::TcpListener::bind(args.listen).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(config, Arc::new(Stats::default())))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
