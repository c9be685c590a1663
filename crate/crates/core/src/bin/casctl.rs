//! Inspect and maintain a content-addressed object store.

use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use blockiot_core::cas::{CasStore, ContentAddress};
use blockiot_core::identity::PatientKey;
use blockiot_core::runtime::{patient_name_key, GatewayConfig};
use blockiot_core::signing::PublicKey;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "casctl", version, about = "Content-addressed store tool")]
struct Cli {
    /// Store directory. Defaults to `<data_dir>/cas` from --config.
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Store a file (or stdin with `-`) and print its address.
    Put { file: PathBuf },
    /// Write an object's bytes to stdout.
    Get { address: ContentAddress },
    /// List a directory tree.
    Ls { address: ContentAddress },
    /// Print the current root published under a patient key.
    Resolve {
        patient_key: PatientKey,
        /// Publisher key in hex; defaults to the patient's key in the keystore from --config.
        #[arg(long)]
        pubkey: Option<PublicKey>,
    },
    /// Every name record published for a patient key.
    History { patient_key: PatientKey },
    /// Re-hash every object and check directory entries.
    Audit,
    /// Print the store digest.
    Digest,
}

fn config(path: &Option<PathBuf>) -> Result<GatewayConfig, String> {
    GatewayConfig::from_process_env(path.as_deref()).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    let root = match (&cli.root, &cli.config) {
        (Some(r), _) => r.clone(),
        (None, path) => config(path)?.data_dir.join("cas"),
    };
    let store = CasStore::open(&root).map_err(|e| format!("{}: {e}", root.display()))?;
    let mut out = std::io::stdout().lock();
    match cli.cmd {
        Cmd::Put { file } => {
            let mut bytes = Vec::new();
            if file.as_os_str() == "-" {
                std::io::stdin().read_to_end(&mut bytes).map_err(|e| e.to_string())?;
            } else {
                bytes = std::fs::read(&file).map_err(|e| format!("{}: {e}", file.display()))?;
            }
            let addr = store.put(&bytes).map_err(|e| e.to_string())?;
            writeln!(out, "{addr}").map_err(|e| e.to_string())?;
        }
        Cmd::Get { address } => {
            let bytes = store.get(&address).map_err(|e| e.to_string())?;
            out.write_all(&bytes).map_err(|e| e.to_string())?;
        }
        Cmd::Ls { address } => {
            for (path, e) in store.walk(&address).map_err(|e| e.to_string())? {
                writeln!(out, "{}\t{}\t{path}", e.address, e.size).map_err(|e| e.to_string())?;
            }
        }
        Cmd::Resolve { patient_key, pubkey } => {
            let key = match pubkey {
                Some(k) => k,
                None => patient_name_key(&config(&cli.config)?, &patient_key, false).map_err(|e| e.to_string())?.public_key(),
            };
            let root = store.resolve_name(&patient_key, &key).map_err(|e| e.to_string())?;
            writeln!(out, "{root}").map_err(|e| e.to_string())?;
        }
        Cmd::History { patient_key } => {
            for r in store.name_history(&patient_key).map_err(|e| e.to_string())? {
                writeln!(out, "{}\t{}", r.sequence, r.root).map_err(|e| e.to_string())?;
            }
        }
        Cmd::Audit => {
            let report = store.audit().map_err(|e| e.to_string())?;
            writeln!(out, "objects {} directories {} problems {}", report.objects, report.directories, report.problems.len())
                .map_err(|e| e.to_string())?;
            for p in &report.problems {
                writeln!(out, "  {p}").map_err(|e| e.to_string())?;
            }
            if !report.is_clean() {
                return Ok(ExitCode::from(2));
            }
        }
        Cmd::Digest => writeln!(out, "{}", store.store_digest()).map_err(|e| e.to_string())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("casctl: {e}");
            ExitCode::from(1)
        }
    }
}
