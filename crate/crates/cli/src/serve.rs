//! The HTTP service.

use anyhow::{Context, Result};
use clap::Args;
use outage_core::service::http;
use outage_core::{Engine, Gateway, SystemClock, SystemConfig, Topology};
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

#[derive(Args)]
pub struct ServeArgs {
    /// Listen address; port 0 picks a free port.
    #[arg(long)]
    bind: Option<String>,
    /// Directory for memory and incident logs.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    topology: Option<PathBuf>,
    /// Playbooks distilled at startup.
    #[arg(long)]
    playbooks: Option<PathBuf>,
    /// Minutes between background consolidation runs.
    #[arg(long)]
    consolidate_every_min: Option<u64>,
}

pub fn run(mut cfg: SystemConfig, args: ServeArgs) -> Result<()> {
    let svc = &mut cfg.service;
    if let Some(b) = args.bind {
        svc.bind = b;
    }
    if let Some(d) = args.data_dir {
        svc.data_dir = d;
    }
    svc.topology = args.topology.or(svc.topology.take());
    svc.playbook_dir = args.playbooks.or(svc.playbook_dir.take());
    svc.consolidate_every_min = args.consolidate_every_min.or(svc.consolidate_every_min);

    let gw = Arc::new(Gateway::from_config(&cfg.provider)?);
    let topo = match &cfg.service.topology {
        Some(p) => Topology::load(p)?,
        None => Topology::empty(),
    };
    let data_dir = cfg.service.data_dir.clone();
    let engine = Engine::open(
        cfg.clone(),
        gw,
        Arc::new(topo),
        Arc::new(SystemClock),
        &data_dir,
    )
    .with_context(|| format!("opening {}", data_dir.display()))?;
    let engine = Arc::new(engine);
    if let Some(dir) = &cfg.service.playbook_dir {
        let r = engine.load_playbooks(dir)?;
        tracing::info!(
            created = r.created.len(),
            merged = r.merged.len(),
            "playbooks distilled"
        );
    }

    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&cfg.service.bind)
            .await
            .with_context(|| format!("binding {}", cfg.service.bind))?;
        let addr = listener.local_addr()?;
        println!("listening on http://{addr}");
        std::io::stdout().flush()?;
        if let Some(every) = cfg.service.consolidate_every_min.filter(|m| *m > 0) {
            let engine = engine.clone();
            tokio::spawn(async move {
                let mut tick = tokio::time::interval(std::time::Duration::from_secs(every * 60));
                tick.tick().await;
                loop {
                    tick.tick().await;
                    let e = engine.clone();
                    match tokio::task::spawn_blocking(move || e.consolidate()).await {
                        Ok(Ok(r)) => tracing::info!(
                            created = r.created.len(),
                            merged = r.merged.len(),
                            "consolidated"
                        ),
                        Ok(Err(err)) => tracing::warn!(%err, "scheduled consolidation failed"),
                        Err(err) => tracing::warn!(%err, "scheduled consolidation panicked"),
                    }
                }
            });
        }
        let app = http::router(engine, cfg.service.api_token.clone());
        http::serve(listener, app, shutdown()).await?;
        Ok(())
    })
}

async fn shutdown() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    tracing::info!("shutting down");
}
