//! Per-command manifests: the resolved config plus SHA-256 hashes of every
//! input and output file. A manifest is itself a valid config file, so
//! `--config <manifest>` replays the run.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::Context;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, MANIFEST_TABLE};

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let mut file = fs::File::open(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

fn hashes(files: &[PathBuf]) -> anyhow::Result<BTreeMap<String, String>> {
    files
        .iter()
        .map(|p| {
            let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
            Ok((name, sha256_file(p)?))
        })
        .collect()
}

pub fn manifest_path(out: &Path, command: &str) -> PathBuf {
    out.join(format!("manifest-{command}.toml"))
}

/// Writes `<out>/manifest-<command>.toml` and returns its path.
pub fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: &[PathBuf],
    artifacts: &[PathBuf],
) -> anyhow::Result<PathBuf> {
    let mut head = toml::Table::new();
    head.insert("command".into(), command.into());
    head.insert("seed".into(), toml::Value::Integer(cfg.run.seed as i64));
    let to_table = |m: BTreeMap<String, String>| toml::Value::Table(m.into_iter().map(|(k, v)| (k, v.into())).collect());
    head.insert("inputs".into(), to_table(hashes(inputs)?));
    head.insert("artifacts".into(), to_table(hashes(artifacts)?));

    let mut doc: toml::Table = cfg.to_toml().parse().expect("serialized config parses");
    doc.insert(MANIFEST_TABLE.into(), toml::Value::Table(head));
    let path = manifest_path(out, command);
    fs::write(&path, toml::to_string(&doc)?).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Artifact name to hash, as recorded in a manifest.
#[cfg(test)]
pub fn read_artifact_hashes(path: &Path) -> anyhow::Result<BTreeMap<String, String>> {
    let doc: toml::Table = fs::read_to_string(path)?.parse()?;
    let artifacts = doc
        .get(MANIFEST_TABLE)
        .and_then(|m| m.get("artifacts"))
        .and_then(|a| a.as_table())
        .with_context(|| format!("{} has no artifact table", path.display()))?;
    Ok(artifacts
        .iter()
        .map(|(k, v)| (k.clone(), v.as_str().unwrap_or_default().to_string()))
        .collect())
}
