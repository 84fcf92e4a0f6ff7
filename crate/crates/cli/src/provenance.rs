//! `run.json`: what was run, on which inputs, and how it ended.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Default, Serialize)]
pub struct RunRecord {
    pub command_line: Vec<String>,
    pub subcommand: String,
    pub seed: Option<u64>,
    pub git_describe: String,
    /// Input path and the SHA-256 of its contents.
    pub inputs: Vec<(String, String)>,
    pub artifacts: Vec<(String, String)>,
    pub status: String,
    pub exit_code: i32,
    pub error: Option<String>,
}

pub fn git_describe() -> String {
    Command::new("git")
        .args(["-C", env!("CARGO_MANIFEST_DIR"), "describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

fn hash_into(h: &mut Sha256, root: &Path, path: &Path) -> std::io::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            if e.file_name().is_some_and(|n| n == "run.json") {
                continue;
            }
            hash_into(h, root, &e)?;
        }
    } else {
        let rel = path.strip_prefix(root).unwrap_or(path).to_string_lossy().into_owned();
        h.update((rel.len() as u64).to_le_bytes());
        h.update(rel.as_bytes());
        let bytes = fs::read(path)?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(())
}

/// SHA-256 of a file, or of every file under a directory in path order.
pub fn checksum(path: &Path) -> String {
    let mut h = Sha256::new();
    match hash_into(&mut h, path, path) {
        Ok(()) => hex::encode(h.finalize()),
        Err(_) => "unreadable".into(),
    }
}

pub fn write(path: &Path, record: &RunRecord) -> std::io::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(record).expect("run record serializes"))
}
