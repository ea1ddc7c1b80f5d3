//! `.ymck` checkpoints: a text header terminated by `end`, then every
//! parameter and buffer as little-endian f64 in declaration order.

use std::path::Path;

use super::{ModelConfig, MultimodalModel};
use crate::data::NormStats;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_EXTENSION: &str = "ymck";
const MAGIC: &str = "ymck";
const END: &[u8] = b"end\n";

impl MultimodalModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_string(&self.config).map_err(|e| Error::format("config", e.to_string()))?;
        let norm = serde_json::to_string(&self.norm).map_err(|e| Error::format("norm", e.to_string()))?;
        let mut out = format!(
            "{MAGIC}\nformat_version: {CHECKPOINT_FORMAT_VERSION}\nseed: {}\nparam_count: {}\ntensors: {}\nbuffers: {}\nconfig: {config}\nnorm: {norm}\n",
            self.seed,
            self.parameter_count(),
            self.store.len(),
            self.store.buffer_count(),
        )
        .into_bytes();
        out.extend_from_slice(END);
        for v in self.store.values() {
            v.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        for id in self.store.buffer_ids() {
            self.store.buffer(id).data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |detail: String| Error::format(format!("checkpoint {}", path.display()), detail);
        let mut header_end = None;
        let mut pos = 0;
        while pos < bytes.len() {
            let line_end = bytes[pos..].iter().position(|&b| b == b'\n').map(|i| pos + i + 1).ok_or_else(|| corrupt("header is not terminated".into()))?;
            if &bytes[pos..line_end] == END {
                header_end = Some((pos, line_end));
                break;
            }
            pos = line_end;
        }
        let (text_end, data_start) = header_end.ok_or_else(|| corrupt("header is not terminated".into()))?;
        let header = std::str::from_utf8(&bytes[..text_end]).map_err(|_| corrupt("header is not text".into()))?;
        let mut lines = header.lines();
        if lines.next() != Some(MAGIC) {
            return Err(corrupt("missing magic line".into()));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| corrupt(format!("missing '{key}'")))?;
            line.strip_prefix(&format!("{key}: ")).map(String::from).ok_or_else(|| corrupt(format!("expected '{key}', found '{line}'")))
        };
        let version = field("format_version")?;
        if version != CHECKPOINT_FORMAT_VERSION.to_string() {
            return Err(Error::Version { path: path.to_path_buf(), expected: CHECKPOINT_FORMAT_VERSION.to_string(), found: version });
        }
        let parse = |key: &str, v: String| v.parse::<u64>().map_err(|_| corrupt(format!("'{key}' is not an integer")));
        let seed = parse("seed", field("seed")?)?;
        let param_count = parse("param_count", field("param_count")?)?;
        let tensors = parse("tensors", field("tensors")?)?;
        let buffers = parse("buffers", field("buffers")?)?;
        let config: ModelConfig = serde_json::from_str(&field("config")?).map_err(|e| corrupt(e.to_string()))?;
        let norm: Option<NormStats> = serde_json::from_str(&field("norm")?).map_err(|e| corrupt(e.to_string()))?;

        let mut model = MultimodalModel::new(config, seed)?;
        if model.parameter_count() as u64 != param_count || model.store.len() as u64 != tensors || model.store.buffer_count() as u64 != buffers {
            return Err(corrupt("parameter layout does not match the configuration".into()));
        }
        let buffer_len: usize = model.store.buffer_ids().map(|id| model.store.buffer(id).len()).sum();
        let expected = (model.parameter_count() + buffer_len) * 8;
        let data = &bytes[data_start..];
        if data.len() != expected {
            return Err(corrupt(format!("expected {expected} bytes of parameters, found {}", data.len())));
        }
        let mut words = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for v in model.store.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x = words.next().unwrap());
        }
        for id in model.store.buffer_ids().collect::<Vec<_>>() {
            model.store.buffer_mut(id).data_mut().iter_mut().for_each(|x| *x = words.next().unwrap());
        }
        model.norm = norm;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
