//! Offline chain inspection: validate, replay and summarize a gateway's ledger.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use blockiot_core::cas::CasStore;
use blockiot_core::contracts::ContractSet;
use blockiot_core::ledger::{cumulative_work, read_chain_file, validate_chain, Block, Ledger, CHAIN_FILE};
use blockiot_core::runtime::{node_keys, signer_registry, GatewayConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ledgerctl", version, about = "Ledger inspection tool")]
struct Cli {
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check linkage, proof of work, merkle roots and signatures.
    Validate,
    /// Rebuild the state from genesis and print its digest.
    Replay,
    /// Block and transaction counts.
    Stats,
    /// Print one block as JSON.
    Show { height: u64 },
}

enum Failure {
    Config(String),
    Integrity(String),
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = GatewayConfig::from_process_env(cli.config.as_deref()).map_err(|e| Failure::Config(e.to_string()))?;
    let (gateway, admin) = node_keys(&cfg, false).map_err(|e| Failure::Config(e.to_string()))?;
    let signers = signer_registry(&gateway, &admin);
    let chain_dir = cfg.data_dir.join("ledger");
    let load = || -> Result<Vec<Block>, Failure> {
        let (blocks, torn) =
            read_chain_file(&chain_dir.join(CHAIN_FILE)).map_err(|e| if e.is_integrity() {
                Failure::Integrity(e.to_string())
            } else {
                Failure::Config(e.to_string())
            })?;
        if torn {
            eprintln!("ledgerctl: chain file ends in a torn record, ignoring it");
        }
        Ok(blocks)
    };
    match cli.cmd {
        Cmd::Validate => {
            let blocks = load()?;
            validate_chain(&blocks, &signers).map_err(|e| Failure::Integrity(e.to_string()))?;
            println!("valid: {} blocks, tip {}", blocks.len(), blocks.last().map(|b| b.hash.to_string()).unwrap_or_default());
        }
        Cmd::Replay => {
            let contracts =
                ContractSet::load_dir(&cfg.contract_dir).map_err(|e| Failure::Config(e.to_string()))?;
            let cas = Arc::new(CasStore::open(cfg.data_dir.join("cas")).map_err(|e| Failure::Config(e.to_string()))?);
            // Opening replays from genesis; the directory is not written unless a torn tail needs cutting.
            let ledger = Ledger::open(&chain_dir, cfg.ledger_config(), signers, contracts, cas).map_err(|e| {
                if e.is_integrity() {
                    Failure::Integrity(e.to_string())
                } else {
                    Failure::Config(e.to_string())
                }
            })?;
            let state = ledger.state();
            println!("height {}", state.tip.as_ref().map_or(0, |t| t.height));
            println!("transactions {}", state.tx_count);
            println!("alerts {}", state.alerts.len());
            println!("patients {}", state.observations.len());
            println!("state_digest {}", state.state_digest());
        }
        Cmd::Stats => {
            let blocks = load()?;
            let mut kinds: BTreeMap<&str, usize> = BTreeMap::new();
            for tx in blocks.iter().flat_map(|b| &b.transactions) {
                *kinds.entry(tx.kind.as_str()).or_default() += 1;
            }
            println!("blocks {}", blocks.len());
            for (k, n) in kinds {
                println!("  {k} {n}");
            }
            println!("cumulative_work {}", cumulative_work(&blocks));
            if let (Some(first), Some(last)) = (blocks.get(1), blocks.last()) {
                if blocks.len() > 2 {
                    let span = last.timestamp.millis() - first.timestamp.millis();
                    println!("mean_interval_ms {}", span / (blocks.len() as i64 - 2));
                }
            }
        }
        Cmd::Show { height } => {
            let blocks = load()?;
            let b = blocks
                .get(height as usize)
                .ok_or_else(|| Failure::Config(format!("no block at height {height}")))?;
            println!("{}", serde_json::to_string_pretty(b).expect("block serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("ledgerctl: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Integrity(e)) => {
            eprintln!("ledgerctl: integrity failure: {e}");
            ExitCode::from(2)
        }
    }
}
