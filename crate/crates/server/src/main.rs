use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use csi_core::eventlog::read_log;
use csi_core::export::{Exports, SUMMARIES_MD};
use csi_core::fixture::Fixture;
use csi_core::gateway::{mock_script_load, Fallback, Gateway, RemoteBackend, RemoteConfig};
use csi_core::replay::{record_from_log, replay};
use csi_core::runtime::SessionConfig;
use csi_core::script::{load_scripts, stochastic_bots, BotScript};
use csi_core::time::{Millis, ParticipantId};
use csi_server::hub::{Hub, HubConfig};
use csi_server::swarm::{run_swarm, run_swarm_realtime};

#[derive(Parser)]
#[command(name = "csi", version, about = "Conversational swarm deliberation server")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Mock,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Md,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the websocket chat and HTTP admin API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, value_enum, default_value = "mock")]
        backend: Backend,
        /// JSONL script for the mock backend; unscripted calls use keyword scoring.
        #[arg(long)]
        mock_script: Option<PathBuf>,
        /// Admin bearer key; also read from CSI_ADMIN_KEY. Generated if absent.
        #[arg(long, env = "CSI_ADMIN_KEY")]
        admin_key: Option<String>,
        #[arg(long)]
        log_dir: Option<PathBuf>,
    },
    /// Play synthetic participants through a session and write its log and exports.
    RunSynthetic {
        #[arg(long)]
        participants: Option<usize>,
        /// Session length in seconds.
        #[arg(long)]
        duration: Option<u64>,
        /// A fixture directory or a bots JSONL file. Without it, stochastic bots are generated.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated options, for non-fixture runs.
        #[arg(long, value_delimiter = ',')]
        options: Vec<String>,
        #[arg(long, default_value = "Which option should the group choose?")]
        question: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Messages per minute per stochastic bot.
        #[arg(long, default_value_t = 4.0)]
        rate: f64,
        /// Run over real websockets on the wall clock instead of the simulated clock.
        #[arg(long)]
        real_time: bool,
    },
    /// Recompute every export from an event log.
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print or write exports from an event log.
    Export {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
        /// Write files here instead of printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn gateway(backend: Backend, mock_script: Option<&Path>) -> Result<Gateway, String> {
    match backend {
        Backend::Mock => match mock_script {
            Some(p) => {
                let mock = mock_script_load(p).map_err(|e| e.to_string())?;
                Ok(Gateway::new(mock.with_fallback(Fallback::Heuristic)))
            }
            None => Ok(Gateway::heuristic()),
        },
        Backend::Remote => {
            let remote = RemoteBackend::new(RemoteConfig::from_env()?).map_err(|e| e.to_string())?;
            Ok(Gateway::new(remote))
        }
    }
}

fn write_exports(exports: &Exports, dir: &Path) -> Result<(), String> {
    exports.write_to(dir).map_err(|e| format!("cannot write {}: {e}", dir.display()))
}

struct Plan {
    config: SessionConfig,
    bots: Vec<BotScript>,
    gateway: Arc<Gateway>,
}

fn synthetic_plan(
    participants: Option<usize>,
    duration: Option<u64>,
    script: Option<&Path>,
    options: Vec<String>,
    question: String,
    seed: u64,
    rate: f64,
) -> Result<Plan, String> {
    if let Some(dir) = script.filter(|p| p.is_dir()) {
        let fixture = Fixture::load(dir).map_err(|e| e.to_string())?;
        let config = fixture.config();
        if participants.is_some_and(|n| n != config.participants.len()) {
            return Err(format!("fixture has {} participants", config.participants.len()));
        }
        if duration.is_some_and(|d| Millis::from_secs(d) != config.duration) {
            return Err(format!("fixture lasts {} s", config.duration.0 / 1000));
        }
        return Ok(Plan {
            gateway: fixture.gateway(),
            bots: fixture.bots,
            config,
        });
    }
    if options.is_empty() {
        return Err("--options is required without a fixture directory".into());
    }
    let duration = Millis::from_secs(duration.ok_or("--duration is required without a fixture directory")?);
    let bots = match script {
        Some(file) => load_scripts(file).map_err(|e| e.to_string())?,
        None => {
            let n = participants.ok_or("--participants is required without --script")?;
            let ids: Vec<ParticipantId> = (1..=n).map(|i| ParticipantId(format!("p{i:02}"))).collect();
            stochastic_bots(&ids, &options, rate, seed)
        }
    };
    if participants.is_some_and(|n| n != bots.len()) {
        return Err(format!("{} bots for {} participants", bots.len(), participants.unwrap_or(0)));
    }
    let roster = bots.iter().map(|b| b.bot.clone()).collect();
    let config = SessionConfig::new(question, options, roster, duration)
        .with_id("synthetic")
        .with_seed(seed);
    Ok(Plan {
        config,
        bots,
        gateway: Arc::new(Gateway::heuristic()),
    })
}

async fn run(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Serve {
            port,
            host,
            backend,
            mock_script,
            admin_key,
            log_dir,
        } => {
            let gw = Arc::new(gateway(backend, mock_script.as_deref())?);
            let admin_key = admin_key.unwrap_or_else(|| {
                let key = format!("{:032x}", rand::random::<u128>());
                eprintln!("admin key: {key}");
                key
            });
            let hub = Hub::new(
                HubConfig {
                    admin_key: Some(admin_key),
                    log_dir,
                    ..HubConfig::default()
                },
                gw,
            );
            let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                .await
                .map_err(|e| format!("cannot bind {host}:{port}: {e}"))?;
            eprintln!("listening on {}", listener.local_addr().map_err(|e| e.to_string())?);
            axum::serve(listener, csi_server::http::router(hub))
                .await
                .map_err(|e| e.to_string())
        }
        Command::RunSynthetic {
            participants,
            duration,
            script,
            out,
            options,
            question,
            seed,
            rate,
            real_time,
        } => {
            let plan = synthetic_plan(participants, duration, script.as_deref(), options, question, seed, rate)?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            let hub_config = HubConfig {
                log_dir: Some(out.clone()),
                ..HubConfig::default()
            };
            let id = plan.config.session_id.clone();
            if real_time {
                let hub = Hub::new(hub_config, plan.gateway);
                let report = run_swarm_realtime(hub, &plan.config, &plan.bots).await.map_err(|e| e.to_string())?;
                let p99 = report.latency_percentile(0.99).unwrap_or_default();
                eprintln!(
                    "{} sent, {} rejected, {:.2} msg/s, p99 latency {:?}, {} order violations, {} incomplete",
                    report.sent,
                    report.rejected,
                    report.rate(),
                    p99,
                    report.order_violations.len(),
                    report.missing.len()
                );
            } else {
                let hub = Hub::new(hub_config, Arc::clone(&plan.gateway));
                let config = plan.config.clone();
                let bots = plan.bots;
                let gw = plan.gateway;
                tokio::task::spawn_blocking(move || run_swarm(&hub, &config, gw, &bots))
                    .await
                    .map_err(|e| e.to_string())?
                    .map_err(|e| e.to_string())?;
            }
            let log = out.join(format!("{id}.events.jsonl"));
            write_exports(&replay(&log).map_err(|e| e.to_string())?, &out)?;
            let record = record_from_log(&read_log(&log).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            println!("final answer: {}", record.final_answer.as_deref().unwrap_or("(none)"));
            println!("log: {}", log.display());
            Ok(())
        }
        Command::Replay { log, out } => write_exports(&replay(&log).map_err(|e| e.to_string())?, &out),
        Command::Export { log, format, out } => {
            let exports = replay(&log).map_err(|e| e.to_string())?;
            let files: Vec<(&str, &str)> = match format {
                Format::Csv => exports.csv_files().collect(),
                Format::Md => vec![(SUMMARIES_MD, exports.get(SUMMARIES_MD).unwrap_or_default())],
            };
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
                    for (name, body) in files {
                        std::fs::write(dir.join(name), body).map_err(|e| e.to_string())?;
                    }
                }
                None if files.len() == 1 => print!("{}", files[0].1),
                None => {
                    for (name, body) in files {
                        println!("# {name}");
                        print!("{body}");
                    }
                }
            }
            Ok(())
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
