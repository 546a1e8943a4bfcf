//! Checkpoint directory format: `ckpt.json` (model kind, shapes, config
//! hash, epoch, metrics, section table) plus `params.bin` holding the named
//! sections as little-endian IEEE-754 binary64. Per-epoch metrics append to
//! `metrics.csv`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::cells::Section;
use crate::error::{Error, Result};
use crate::training::EpochRow;

pub const CKPT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SectionMeta {
    pub name: String,
    pub len: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    /// Cell kind tag (elm, lstm, lif, alif, snn).
    pub kind: String,
    /// Verbatim echo of the model configuration.
    pub model: serde_json::Value,
    pub sections: Vec<SectionMeta>,
    pub epoch: usize,
    pub metric_name: String,
    pub best_metric: f64,
    pub divergent: bool,
    /// FNV-1a hash of the canonical run configuration.
    pub config_hash: String,
    pub metrics: serde_json::Value,
}

pub fn section_table(layout: &[Section]) -> Vec<SectionMeta> {
    let mut offset = 0;
    layout
        .iter()
        .map(|s| {
            let m = SectionMeta { name: s.name.clone(), len: s.len, offset };
            offset += s.len;
            m
        })
        .collect()
}

/// FNV-1a over a canonical byte string; used to tie checkpoints to configs.
pub fn config_hash(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

pub fn save_checkpoint(dir: &Path, meta: &CheckpointMeta, params: &[f64]) -> Result<()> {
    let expected: usize = meta.sections.iter().map(|s| s.len).sum();
    if expected != params.len() {
        return Err(Error::Shape(format!(
            "checkpoint: section table covers {expected} scalars, got {}",
            params.len()
        )));
    }
    fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Format(format!("ckpt serialization: {e}")))?;
    fs::write(dir.join("ckpt.json"), json)?;
    let mut w = BufWriter::new(fs::File::create(dir.join("params.bin"))?);
    for v in params {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointMeta, Vec<f64>)> {
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(dir.join("ckpt.json"))?)
        .map_err(|e| Error::Format(format!("ckpt.json: {e}")))?;
    if meta.schema_version != CKPT_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint schema version {}",
            meta.schema_version
        )));
    }
    let expected: usize = meta.sections.iter().map(|s| s.len).sum();
    let bytes = fs::read(dir.join("params.bin"))?;
    if bytes.len() != 8 * expected {
        return Err(Error::Format(format!(
            "params.bin: {} bytes, expected {}",
            bytes.len(),
            8 * expected
        )));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
        .collect();
    Ok((meta, params))
}

fn field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Append epoch rows, writing the header when the file is new.
pub fn append_metrics_csv(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let new = !path.exists();
    let mut w = BufWriter::new(fs::OpenOptions::new().create(true).append(true).open(path)?);
    if new {
        writeln!(w, "epoch,split,loss,rmse,auc,accuracy,lr")?;
    }
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.split,
            r.loss,
            field(r.rmse),
            field(r.auc),
            field(r.accuracy),
            r.lr
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let layout = vec![Section::new("a", 3), Section::new("b", 2)];
        let meta = CheckpointMeta {
            schema_version: CKPT_SCHEMA_VERSION,
            kind: "elm".into(),
            model: serde_json::json!({"d_m": 4}),
            sections: section_table(&layout),
            epoch: 7,
            metric_name: "rmse".into(),
            best_metric: 0.25,
            divergent: false,
            config_hash: config_hash(b"cfg"),
            metrics: serde_json::json!({"rmse": 0.25}),
        };
        let params = vec![1.0, -2.5, 3.25, 0.0, 9.0];
        save_checkpoint(dir.path(), &meta, &params).unwrap();
        let (m2, p2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(p2, params);
        assert_eq!(m2.sections[1].offset, 3);
        assert_eq!(m2.epoch, 7);
    }

    #[test]
    fn checkpoint_rejects_bad_section_total() {
        let dir = tempfile::tempdir().unwrap();
        let meta = CheckpointMeta {
            schema_version: CKPT_SCHEMA_VERSION,
            kind: "elm".into(),
            model: serde_json::json!({}),
            sections: section_table(&[Section::new("a", 2)]),
            epoch: 0,
            metric_name: "rmse".into(),
            best_metric: 0.0,
            divergent: false,
            config_hash: "0".into(),
            metrics: serde_json::json!({}),
        };
        assert!(save_checkpoint(dir.path(), &meta, &[1.0, 2.0, 3.0]).is_err());
    }
}
