use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const SYNTH_KINDS: [&str; 6] = [
    "eight_gaussians",
    "two_moons",
    "three_node_convex",
    "three_node_nonconvex",
    "gp_spectral",
    "gp_local",
];

pub fn read_json(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

/// Parses `value` as `T`; `what` prefixes any field error.
pub fn parse<T: DeserializeOwned>(value: &Value, what: &str) -> CliResult<T> {
    serde_json::from_value(value.clone()).map_err(|e| CliError::usage(format!("{what}: {e}")))
}

/// Validates the `kind` tag of a dataset spec before full parsing so the
/// error names the field.
pub fn check_kind(spec: &Value, what: &str) -> CliResult<()> {
    match spec.get("kind") {
        None => Err(CliError::usage(format!("{what}: missing field `kind`"))),
        Some(Value::String(k)) if SYNTH_KINDS.contains(&k.as_str()) => Ok(()),
        Some(other) => Err(CliError::usage(format!(
            "{what}: field `kind` has unknown value {other}; expected one of {}",
            SYNTH_KINDS.join(", ")
        ))),
    }
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// `IFLOW_THREADS`, if set, must be a positive integer. All kernels are
/// single-threaded, so the effective count is always 1.
pub fn thread_cap() -> CliResult<usize> {
    match std::env::var("IFLOW_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(1),
            _ => Err(CliError::usage(format!(
                "IFLOW_THREADS: expected a positive integer, got '{s}'"
            ))),
        },
    }
}

#[derive(Serialize)]
struct Versions {
    iflow_core: &'static str,
    iflow_cli: &'static str,
    format: u32,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    config_hash: String,
    config: &'a Value,
    threads: usize,
    versions: Versions,
    outputs: Vec<String>,
}

/// Manifest path next to a single output file: `out.json` → `out.manifest.json`.
pub fn manifest_beside(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

/// Writes the run manifest to `path`. The hash covers the command, seed and
/// configuration; `serde_json` maps are key-sorted, so it is canonical.
pub fn write_manifest(
    path: &Path,
    command: &str,
    seed: u64,
    config: &Value,
    outputs: &[PathBuf],
) -> CliResult<()> {
    let canonical = serde_json::json!({ "command": command, "seed": seed, "config": config });
    let digest = Sha256::digest(canonical.to_string().as_bytes());
    let config_hash = digest.iter().map(|b| format!("{b:02x}")).collect();
    let manifest = Manifest {
        command,
        seed,
        config_hash,
        config,
        threads: thread_cap()?,
        versions: Versions {
            iflow_core: iflow::VERSION,
            iflow_cli: env!("CARGO_PKG_VERSION"),
            format: 1,
        },
        outputs: outputs
            .iter()
            .map(|p| {
                p.file_name().map_or_else(
                    || p.display().to_string(),
                    |n| n.to_string_lossy().into_owned(),
                )
            })
            .collect(),
    };
    write_json(path, &manifest)
}
