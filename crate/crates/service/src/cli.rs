//! The `memstrata` command line.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};
use memstrata_core::eval::{self, Transcript};
use memstrata_core::persistence::{self, MemorySnapshot};
use memstrata_core::Provider;

use crate::api::{self, AppState};
use crate::registry::{self, SessionRegistry, Tier};
use crate::settings::{Overrides, ProviderKind, Settings};

#[derive(Debug, Parser)]
#[command(name = "memstrata", version, about = "Tiered conversational memory service")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true, env = "MEMSTRATA_CONFIG")]
    pub config: Option<PathBuf>,
    /// Directory holding per-user snapshots and archives.
    #[arg(long, global = true, env = "MEMSTRATA_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum, env = "MEMSTRATA_PROVIDER")]
    pub provider: Option<ProviderKind>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP service.
    Serve {
        #[arg(long, env = "MEMSTRATA_LISTEN")]
        listen: Option<String>,
        /// Require `Authorization: Bearer <token>` on every /v1 route.
        #[arg(long, env = "MEMSTRATA_BEARER_TOKEN", hide_env_values = true)]
        bearer_token: Option<String>,
    },
    /// Print one tier of a stored user memory as JSON.
    Inspect {
        user_id: String,
        /// stm, mtm or lpm
        tier: String,
        /// Evaluate heats at this time instead of now.
        #[arg(long)]
        now: Option<u64>,
    },
    /// Replay a JSONL transcript and score the answers.
    ///
    /// With --data-dir the snapshot is saved after every step.
    Replay {
        #[arg(long)]
        transcript: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value = "replay")]
        user: String,
    },
    /// Delete everything stored for a user.
    Wipe { user_id: String },
}

impl Cli {
    fn overrides(&self) -> Overrides {
        let (listen, bearer_token) = match &self.command {
            Command::Serve { listen, bearer_token } => (listen.clone(), bearer_token.clone()),
            _ => (None, None),
        };
        Overrides {
            config: self.config.clone(),
            listen,
            data_dir: self.data_dir.clone(),
            provider: self.provider,
            bearer_token,
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let settings = Settings::resolve(cli.overrides())?;
    match cli.command {
        Command::Serve { .. } => serve(settings),
        Command::Inspect { user_id, tier, now } => {
            let tier: Tier = tier.parse()?;
            let path = persistence::snapshot_path(&settings.data_dir, &user_id)?;
            let memory = persistence::load_with(&path, Some(&settings.engine))?.into_memory();
            let now = now.unwrap_or_else(|| registry::system_clock()().max(memory.latest_timestamp()));
            let dump = registry::dump_tier(&memory, tier, now, &settings.engine)?;
            println!("{}", serde_json::to_string_pretty(&dump)?);
            Ok(())
        }
        Command::Replay { transcript, report, user } => {
            let checkpoint_dir = cli.data_dir;
            replay(&settings, &transcript, report, &user, checkpoint_dir)
        }
        Command::Wipe { user_id } => {
            let existed = persistence::wipe(&settings.data_dir, &user_id)?;
            eprintln!("{}", if existed { "wiped" } else { "nothing stored" });
            Ok(())
        }
    }
}

fn replay(
    settings: &Settings,
    transcript: &std::path::Path,
    report: Option<PathBuf>,
    user: &str,
    checkpoint_dir: Option<PathBuf>,
) -> anyhow::Result<()> {
    let transcript = Transcript::from_path(transcript)?;
    let provider = settings.build_provider()?;
    let mut step_time = 0;
    let outcome = eval::replay_with(&transcript, user, &settings.engine, &provider, |memory, _| {
        if let Some(dir) = &checkpoint_dir {
            step_time = step_time.max(memory.latest_timestamp());
            persistence::save(&MemorySnapshot::capture(memory, step_time), dir)?;
        }
        Ok(())
    })?;
    let json = serde_json::to_string_pretty(&outcome.report)?;
    match report {
        Some(path) => std::fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?,
        None => writeln!(std::io::stdout(), "{json}")?,
    }
    let r = &outcome.report;
    eprintln!(
        "turns={} questions={} f1={:.4} bleu1={:.4} calls/respond={:.4}",
        r.turns_ingested, r.questions, r.mean_f1, r.mean_bleu1, r.avg_calls_per_respond
    );
    Ok(())
}

fn serve(settings: Settings) -> anyhow::Result<()> {
    // The remote client blocks, so it is built before the runtime starts.
    let provider: Provider = settings.build_provider()?;
    let registry = SessionRegistry::new(&settings.data_dir, settings.engine.clone(), provider, registry::system_clock());
    let state = AppState {
        registry: Arc::new(registry),
        bearer_token: settings.bearer_token.as_deref().map(Arc::from),
    };
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(settings.listen)
            .await
            .with_context(|| format!("binding {}", settings.listen))?;
        tracing::info!(addr = %listener.local_addr()?, data_dir = %settings.data_dir.display(), "listening");
        axum::serve(listener, api::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
