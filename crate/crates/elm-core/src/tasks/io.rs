//! Dataset directory format: `meta.json` describing the geometry plus
//! `inputs.bin` (little-endian IEEE-754 binary32, [N, T, C] row-major) and
//! `targets.bin` whose layout is declared in the meta. Bit-exact across
//! platforms.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tasks::{Dataset, Targets, TaskKind};

pub const SCHEMA_VERSION: u32 = 1;
const TARGETS_PER_STEP: &str = "per_step_voltage_spike_f32";
const TARGETS_CLASS: &str = "class_index_u32";

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub kind: TaskKind,
    pub channels: usize,
    pub steps: usize,
    pub dt_ms: f64,
    pub n_sequences: usize,
    pub target_layout: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
    pub seed: u64,
    /// Verbatim echo of the generator configuration.
    pub generator: serde_json::Value,
}

fn write_f32s(path: &Path, values: impl Iterator<Item = f32>, expect: usize) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let mut n = 0usize;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
        n += 1;
    }
    w.flush()?;
    if n != expect {
        return Err(Error::Format(format!("wrote {n} values, expected {expect}")));
    }
    Ok(())
}

fn read_f32s(path: &Path, expect: usize) -> Result<Vec<f32>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != expect * 4 {
        return Err(Error::Format(format!(
            "{}: {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expect * 4
        )));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

/// Write a dataset directory. `generator` is echoed verbatim into the meta.
pub fn save_dataset(dir: &Path, ds: &Dataset, generator: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n = ds.n_sequences();
    let meta = DatasetMeta {
        schema_version: SCHEMA_VERSION,
        kind: ds.kind,
        channels: ds.channels,
        steps: ds.steps,
        dt_ms: ds.dt_ms,
        n_sequences: n,
        target_layout: match ds.targets {
            Targets::PerStep { .. } => TARGETS_PER_STEP.to_string(),
            Targets::Class { .. } => TARGETS_CLASS.to_string(),
        },
        n_classes: ds.n_classes(),
        seed: ds.seed,
        generator,
    };
    let meta_json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Format(format!("meta serialization: {e}")))?;
    fs::write(dir.join("meta.json"), meta_json)?;

    write_f32s(
        &dir.join("inputs.bin"),
        ds.inputs.iter().map(|&v| v as f32),
        n * ds.steps * ds.channels,
    )?;

    match &ds.targets {
        Targets::PerStep { voltage, spikes } => {
            let pairs = voltage
                .iter()
                .zip(spikes.iter())
                .flat_map(|(&v, &s)| [v as f32, s as f32]);
            write_f32s(&dir.join("targets.bin"), pairs, 2 * n * ds.steps)?;
        }
        Targets::Class { labels, .. } => {
            let mut w = BufWriter::new(fs::File::create(dir.join("targets.bin"))?);
            for &l in labels {
                w.write_all(&l.to_le_bytes())?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

/// Read a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Dataset, DatasetMeta)> {
    let meta_bytes = fs::read_to_string(dir.join("meta.json"))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_bytes)
        .map_err(|e| Error::Format(format!("meta.json: {e}")))?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset schema version {}",
            meta.schema_version
        )));
    }
    let n = meta.n_sequences;
    let inputs = read_f32s(&dir.join("inputs.bin"), n * meta.steps * meta.channels)?
        .into_iter()
        .map(|v| v as f64)
        .collect();

    let targets = match meta.target_layout.as_str() {
        TARGETS_PER_STEP => {
            let flat = read_f32s(&dir.join("targets.bin"), 2 * n * meta.steps)?;
            let mut voltage = Vec::with_capacity(n * meta.steps);
            let mut spikes = Vec::with_capacity(n * meta.steps);
            for pair in flat.chunks_exact(2) {
                voltage.push(pair[0] as f64);
                spikes.push(pair[1] as f64);
            }
            Targets::PerStep { voltage, spikes }
        }
        TARGETS_CLASS => {
            let bytes = fs::read(dir.join("targets.bin"))?;
            if bytes.len() != 4 * n {
                return Err(Error::Format(format!(
                    "targets.bin: {} bytes, expected {}",
                    bytes.len(),
                    4 * n
                )));
            }
            let labels: Vec<u32> = bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let n_classes = meta.n_classes.ok_or_else(|| {
                Error::Format("classification dataset meta lacks n_classes".into())
            })?;
            Targets::Class { labels, n_classes }
        }
        other => return Err(Error::Format(format!("unknown target layout {other}"))),
    };

    Ok((
        Dataset {
            kind: meta.kind,
            channels: meta.channels,
            steps: meta.steps,
            dt_ms: meta.dt_ms,
            inputs,
            targets,
            seed: meta.seed,
        },
        meta,
    ))
}
