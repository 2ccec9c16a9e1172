//! Serves canned backend responses from a fixture directory.

use std::path::PathBuf;

use anyhow::{Context, Result};
use backdrop_core::backends::stub::{StubRoutes, StubServer};
use clap::Parser;

#[derive(Parser)]
#[command(
    name = "backdrop-stub",
    version,
    about = "Replay backend responses from fixture files"
)]
struct Args {
    /// Directory with `<detect|segment|caption|background>.response.json`.
    #[arg(long)]
    fixtures: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Answer the first N requests with 503.
    #[arg(long, default_value_t = 0)]
    fail_first: usize,
}

fn main() -> Result<()> {
    env_logger::init();
    let args = Args::parse();
    let routes = StubRoutes::from_fixture_dir(&args.fixtures)
        .with_context(|| format!("loading fixtures from {}", args.fixtures.display()))?
        .fail_first(args.fail_first);
    let server =
        StubServer::start(&args.addr, routes).with_context(|| format!("binding {}", args.addr))?;
    println!("listening on {}", server.url());
    server.wait();
    Ok(())
}
