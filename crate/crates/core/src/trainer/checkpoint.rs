//! On-disk layout of trained models: `weights.bin` with every tensor,
//! `meta.json` with everything else, `log.jsonl` with the loss history.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use icmlm_tensor::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::corpus::store::{read_jsonl, write_jsonl};
use crate::error::{Error, Result};
use crate::objectives::LossReport;
use crate::text::{LmConfig, TextEncoder, Vocabulary};

const MAGIC: &[u8; 4] = b"ICMW";
pub const WEIGHTS_VERSION: u32 = 1;
pub const META_VERSION: u32 = 1;

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const META_FILE: &str = "meta.json";
pub const LOG_FILE: &str = "log.jsonl";

/// Writes named tensor groups; names are stored as `group:name`.
pub fn write_weights(path: &Path, groups: &[(&str, &ParamStore<f32>)]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let count: usize = groups.iter().map(|(_, p)| p.len()).sum();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for (group, store) in groups {
        for (name, t) in store.iter() {
            let full = format!("{group}:{name}");
            buf.extend_from_slice(&(full.len() as u32).to_le_bytes());
            buf.extend_from_slice(full.as_bytes());
            buf.extend_from_slice(&2u32.to_le_bytes());
            buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    data: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.data.len() {
            return Err(Error::Decode { file: self.path.to_path_buf(), msg: "truncated weights file".into() });
        }
        let s = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Reads a weights file back into its groups.
pub fn read_weights(path: &Path) -> Result<Vec<(String, ParamStore<f32>)>> {
    let mut data = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut data)).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { data: &data, at: 0, path };
    let bad = |msg: &str| Error::Decode { file: path.to_path_buf(), msg: msg.to_string() };
    if c.take(4)? != MAGIC {
        return Err(bad("not a weights file"));
    }
    let version = c.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Incompatible { what: "weights file", found: version, expected: WEIGHTS_VERSION });
    }
    let count = c.u32()?;
    let mut groups: Vec<(String, ParamStore<f32>)> = Vec::new();
    for _ in 0..count {
        let n = c.u32()? as usize;
        let full = String::from_utf8(c.take(n)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
        let (group, name) = full.split_once(':').ok_or_else(|| bad("tensor name lacks a group"))?;
        let ndim = c.u32()? as usize;
        let dims = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims[..] {
            [r, c] => (r, c),
            [n] => (1, n),
            _ => return Err(bad("only 1-D and 2-D tensors are supported")),
        };
        let raw = c.take(rows * cols * 4)?;
        let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let t = Tensor::from_vec(rows, cols, values);
        match groups.iter_mut().find(|(g, _)| g == group) {
            Some((_, store)) => store.insert(name, t),
            None => {
                let mut store = ParamStore::new();
                store.insert(name, t);
                groups.push((group.to_string(), store));
            }
        }
    }
    if c.at != data.len() {
        return Err(bad("trailing bytes after the last tensor"));
    }
    Ok(groups)
}

fn group(groups: &mut Vec<(String, ParamStore<f32>)>, name: &str) -> ParamStore<f32> {
    groups.iter().position(|(g, _)| g == name).map(|i| groups.remove(i).1).unwrap_or_default()
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v).expect("metadata serializes")).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), source: e })
}

#[derive(Serialize, Deserialize)]
struct LmMeta {
    version: u32,
    config: LmConfig,
    vocab: Vec<String>,
    checksum: String,
}

fn lm_meta(lm: &TextEncoder) -> LmMeta {
    LmMeta { version: META_VERSION, config: lm.config().clone(), vocab: lm.vocab().tokens().to_vec(), checksum: lm.checksum() }
}

fn lm_from_meta(meta: LmMeta, params: ParamStore<f32>, file: &Path) -> Result<TextEncoder> {
    let lm = TextEncoder::from_parts(meta.config, Vocabulary::from_tokens(meta.vocab)?, params)?;
    if lm.checksum() != meta.checksum {
        return Err(Error::Checksum { file: file.to_path_buf() });
    }
    Ok(lm)
}

/// Stores a pretrained language model as its own directory.
pub fn save_lm(dir: &Path, lm: &TextEncoder) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_weights(&dir.join(WEIGHTS_FILE), &[("lm", lm.params())])?;
    write_json(&dir.join(META_FILE), &lm_meta(lm))
}

pub fn load_lm(dir: &Path) -> Result<TextEncoder> {
    let meta: LmMeta = read_json(&dir.join(META_FILE))?;
    if meta.version != META_VERSION {
        return Err(Error::Incompatible { what: "language model metadata", found: meta.version, expected: META_VERSION });
    }
    let weights = dir.join(WEIGHTS_FILE);
    let mut groups = read_weights(&weights)?;
    lm_from_meta(meta, group(&mut groups, "lm"), &weights)
}

/// Sizes a checkpoint is tied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub k: usize,
    pub vocab_size: usize,
    pub d_w: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    version: u32,
    step: u64,
    config: TrainConfig,
    dims: ModelDims,
    optimizer: String,
    lm: Option<LmMeta>,
}

/// Everything needed to continue training or to run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub dims: ModelDims,
    /// Optimizer steps already taken.
    pub step: u64,
    pub params: ParamStore<f32>,
    pub optim_state: ParamStore<f32>,
    pub lm: Option<TextEncoder>,
    pub log: Vec<LossReport>,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let empty = ParamStore::new();
        let lm_params = self.lm.as_ref().map(TextEncoder::params).unwrap_or(&empty);
        write_weights(&dir.join(WEIGHTS_FILE), &[("model", &self.params), ("optim", &self.optim_state), ("lm", lm_params)])?;
        let meta = Meta {
            version: META_VERSION,
            step: self.step,
            config: self.config.clone(),
            dims: self.dims,
            optimizer: self.config.optimizer.clone(),
            lm: self.lm.as_ref().map(lm_meta),
        };
        write_json(&dir.join(META_FILE), &meta)?;
        write_jsonl(&dir.join(LOG_FILE), &self.log)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        if !meta_path.exists() {
            return Err(Error::NotFound(format!("checkpoint not found: {}", dir.display())));
        }
        let meta: Meta = read_json(&meta_path)?;
        if meta.version != META_VERSION {
            return Err(Error::Incompatible { what: "checkpoint metadata", found: meta.version, expected: META_VERSION });
        }
        let weights = dir.join(WEIGHTS_FILE);
        let mut groups = read_weights(&weights)?;
        let params = group(&mut groups, "model");
        let optim_state = group(&mut groups, "optim");
        let lm = match meta.lm {
            Some(m) => Some(lm_from_meta(m, group(&mut groups, "lm"), &weights)?),
            None => None,
        };
        let log_path = dir.join(LOG_FILE);
        let log = if log_path.exists() { read_jsonl(&log_path)? } else { Vec::new() };
        Ok(Checkpoint { config: meta.config, dims: meta.dims, step: meta.step, params, optim_state, lm, log })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ParamStore::new();
        a.insert("x.w", Tensor::from_vec(2, 3, vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-12, 7.0, -1e30]));
        let mut b = ParamStore::new();
        b.insert("m.x.w", Tensor::from_vec(1, 1, vec![0.25]));
        let path = dir.path().join("w.bin");
        write_weights(&path, &[("model", &a), ("optim", &b)]).unwrap();
        let mut back = read_weights(&path).unwrap();
        let a2 = group(&mut back, "model");
        assert_eq!(a2.checksum(), a.checksum());
        assert_eq!(group(&mut back, "optim"), b);

        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_weights(&path), Err(Error::Incompatible { found: 9, .. })));
        bytes.truncate(20);
        bytes[4] = 1;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_weights(&path), Err(Error::Decode { .. })));
    }
}
