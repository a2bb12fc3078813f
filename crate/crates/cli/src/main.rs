//! `dhtvote`: run a voting node, cast or fetch votes, run simulations.

use std::fs;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};

use dhtvote::client::{fetch_votes, CombineMode};
use dhtvote::node::journal::Journal;
use dhtvote::node::ops;
use dhtvote::node::udp::{resolve_host, UdpNode};
use dhtvote::node::{CastOutcome, NodeConfig, DEFAULT_ANNOUNCE_PERIOD_SECS};
use dhtvote::sim::{ScenarioConfig, Simulation};
use dhtvote::{InfoHash, Polarity};

#[derive(Parser)]
#[command(name = "dhtvote", version, about = "Distributed voting over a Kademlia DHT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a long-lived node.
    Run {
        #[arg(long, default_value = "0.0.0.0:6881")]
        bind: SocketAddrV4,
        #[arg(long)]
        state_dir: PathBuf,
        /// Contacts to join through (host:port); may be repeated.
        #[arg(long, num_args = 1..)]
        bootstrap: Vec<String>,
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
        k: u64,
        /// Minutes between re-announces of our own votes (1 to 59).
        #[arg(long, default_value_t = DEFAULT_ANNOUNCE_PERIOD_SECS / 60, value_parser = clap::value_parser!(u64).range(1..60))]
        announce_period: u64,
        /// Address other nodes see us at, if different from --bind.
        #[arg(long)]
        external_ip: Option<Ipv4Addr>,
    },
    /// Cast a vote once and announce it.
    Vote {
        #[arg(long)]
        state_dir: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        bootstrap: Vec<String>,
        #[arg(long)]
        infohash: InfoHash,
        /// +1 or -1.
        #[arg(long, allow_hyphen_values = true, value_parser = parse_polarity)]
        polarity: Polarity,
        #[arg(long, default_value = "0.0.0.0:0")]
        bind: SocketAddrV4,
    },
    /// Fetch the vote counts for a document.
    Get {
        #[arg(long, num_args = 1.., required = true)]
        bootstrap: Vec<String>,
        #[arg(long)]
        infohash: InfoHash,
        #[arg(long)]
        json: bool,
        #[arg(long, default_value = "robust")]
        combiner: CombineMode,
        #[arg(long, default_value = "0.0.0.0:0")]
        bind: SocketAddrV4,
    },
    /// Run a simulated network scenario.
    Simulate {
        /// Scenario config (JSON).
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Report path. The per-document CSV goes next to it with a .csv
        /// extension. Without it the JSON report goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_polarity(s: &str) -> Result<Polarity, String> {
    match s {
        "+1" | "1" => Ok(Polarity::Positive),
        "-1" => Ok(Polarity::Negative),
        _ => Err("expected +1 or -1".into()),
    }
}

/// Failure that should exit with a usage code rather than a runtime one.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = match cli.command {
        Command::Run { .. } => "info",
        _ => "warn",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(default_level)).init();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Run {
            bind,
            state_dir,
            bootstrap,
            k,
            announce_period,
            external_ip,
        } => {
            let config = NodeConfig {
                bind,
                state_dir: Some(state_dir),
                bootstrap: resolve_all(&bootstrap)?,
                k: k as usize,
                announce_period_secs: announce_period * 60,
                external_ip,
                ..NodeConfig::default()
            };
            let (mut node, _) = UdpNode::start(config)?;
            match node.bootstrap() {
                Ok(n) if n > 0 => info!("joined through {n} bootstrap contacts"),
                Ok(_) => info!("no bootstrap contacts given; waiting to be contacted"),
                Err(e) => warn!("{e}; waiting to be contacted"),
            }
            node.run();
            Ok(ExitCode::SUCCESS)
        }
        Command::Vote {
            state_dir,
            bootstrap,
            infohash,
            polarity,
            bind,
        } => vote(state_dir, &bootstrap, infohash, polarity, bind),
        Command::Get {
            bootstrap,
            infohash,
            json,
            combiner,
            bind,
        } => {
            let config = NodeConfig {
                bind,
                bootstrap: resolve_all(&bootstrap)?,
                read_only: true,
                ..NodeConfig::default()
            };
            let (mut node, _) = UdpNode::start(config)?;
            node.bootstrap()?;
            let result = fetch_votes(&mut node, infohash, combiner);
            node.shutdown();
            if json {
                println!("{}", serde_json::to_string(&result)?);
            } else {
                println!(
                    "pos={} neg={} responders={}/{}",
                    result.positive_count, result.negative_count, result.responders, result.queried
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate { scenario, seed, out } => {
            let text = fs::read_to_string(&scenario).with_context(|| format!("reading {}", scenario.display()))?;
            let mut config = ScenarioConfig::from_json(&text)
                .map_err(|e| UsageError(format!("{}: {e}", scenario.display())))?;
            if let Some(seed) = seed {
                config.seed = seed;
            }
            let sim = Simulation::new(config).map_err(|e| UsageError(e.to_string()))?;
            let (report, _) = sim.finish();
            match out {
                Some(path) => {
                    fs::write(&path, report.to_json() + "\n").with_context(|| format!("writing {}", path.display()))?;
                    let csv_path = path.with_extension("csv");
                    fs::write(&csv_path, report.to_csv())
                        .with_context(|| format!("writing {}", csv_path.display()))?;
                    eprintln!(
                        "availability={:.3} mean_error={:.4} datagrams={} bytes={}",
                        report.availability, report.relative_error.mean, report.total_datagrams, report.total_bytes
                    );
                }
                None => println!("{}", report.to_json()),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn resolve_all(specs: &[String]) -> Result<Vec<SocketAddr>> {
    let mut out = Vec::new();
    for s in specs {
        let found = resolve_host(s).with_context(|| format!("resolving bootstrap contact {s}"))?;
        if found.is_empty() {
            bail!("bootstrap contact {s} has no IPv4 address");
        }
        out.extend(found.into_iter().map(SocketAddr::V4));
    }
    Ok(out)
}

fn vote(
    state_dir: PathBuf,
    bootstrap: &[String],
    infohash: InfoHash,
    polarity: Polarity,
    bind: SocketAddrV4,
) -> Result<ExitCode> {
    // Answer from the journal alone when possible: no network needed.
    let journal = Journal::open_dir(&state_dir)?;
    if journal.load()?.votes.iter().any(|v| v.info_hash == infohash) {
        println!("already-voted");
        return Ok(ExitCode::SUCCESS);
    }

    let config = NodeConfig {
        bind,
        state_dir: Some(state_dir),
        bootstrap: resolve_all(bootstrap)?,
        read_only: true,
        ..NodeConfig::default()
    };
    let (mut node, _) = UdpNode::start(config)?;
    node.bootstrap()?;
    let now = ops::Host::now(&node);
    let outcome = node.lock_state().cast_vote(infohash, polarity, now)?;
    if outcome == CastOutcome::AlreadyVoted {
        node.shutdown();
        println!("already-voted");
        return Ok(ExitCode::SUCCESS);
    }
    let report = node.announce_round();
    node.shutdown();
    let ours = report
        .votes
        .iter()
        .find(|v| v.info_hash == infohash)
        .ok_or_else(|| anyhow!("vote missing from announce report"))?;
    println!("accepted delivered={} failed={}", ours.delivered, ours.failures.len());
    if ours.delivered == 0 {
        bail!("vote recorded locally but no replica acknowledged it; it will be re-sent by the next announce");
    }
    Ok(ExitCode::SUCCESS)
}
