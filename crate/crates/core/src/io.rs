//! File formats: line-delimited JSON datasets, JSON checkpoints, and the
//! truth sidecars. Parsers validate everything they admit — finite floats,
//! in-range ids, shape-consistent blocks — and report errors instead of
//! panicking, whatever the input bytes are.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::loss::Similarity;
use crate::model::{MappingSpec, Matrix, ModelParams, WeightFeatures};
use crate::tasks::{ClickSequence, MilBag, PllRecord, TaskKind, TaskSpec};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type IoResult<T> = std::result::Result<T, IoError>;

fn parse_jsonl<T, F>(bytes: &[u8], mut validate: F) -> IoResult<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(&T) -> std::result::Result<(), String>,
{
    let text = std::str::from_utf8(bytes)
        .map_err(|e| IoError::Format(format!("input is not UTF-8: {e}")))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(line).map_err(|source| IoError::Json {
            line: line_no,
            source,
        })?;
        validate(&rec).map_err(|msg| IoError::Invalid { line: line_no, msg })?;
        out.push(rec);
    }
    Ok(out)
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Bags: `{"bag_id", "label", "instances": [[f64...]...],
/// "instance_labels": [int...]?}` per line.
pub fn parse_mil_jsonl(bytes: &[u8]) -> IoResult<Vec<MilBag>> {
    parse_jsonl(bytes, |bag: &MilBag| {
        if bag.instances.is_empty() {
            return Err("bag has no instances".into());
        }
        let dim = bag.instances[0].len();
        if dim == 0 {
            return Err("instances must have at least one feature".into());
        }
        for inst in &bag.instances {
            if inst.len() != dim {
                return Err(format!(
                    "inconsistent feature dimensions: {} vs {dim}",
                    inst.len()
                ));
            }
            if !all_finite(inst) {
                return Err("non-finite feature".into());
            }
        }
        if let Some(labels) = &bag.instance_labels {
            if labels.len() != bag.instances.len() {
                return Err(format!(
                    "{} instance labels for {} instances",
                    labels.len(),
                    bag.instances.len()
                ));
            }
        }
        Ok(())
    })
}

/// Records: `{"features": [f64...], "candidates": [int...], "true_label":
/// int}` per line. The true label must sit in the candidate set.
pub fn parse_pll_jsonl(bytes: &[u8]) -> IoResult<Vec<PllRecord>> {
    parse_jsonl(bytes, |rec: &PllRecord| {
        if rec.features.is_empty() {
            return Err("record has no features".into());
        }
        if !all_finite(&rec.features) {
            return Err("non-finite feature".into());
        }
        if rec.candidates.is_empty() {
            return Err("empty candidate set".into());
        }
        if !rec.candidates.contains(&rec.true_label) {
            return Err(format!(
                "true label {} missing from candidates {:?}",
                rec.true_label, rec.candidates
            ));
        }
        Ok(())
    })
}

/// Sequences: `{"user": int, "items": [int...]}` per line, at least two
/// items each.
pub fn parse_rs_jsonl(bytes: &[u8]) -> IoResult<Vec<ClickSequence>> {
    parse_jsonl(bytes, |seq: &ClickSequence| {
        if seq.items.len() < 2 {
            return Err(format!("sequence has {} item(s), need at least 2", seq.items.len()));
        }
        Ok(())
    })
}

pub fn write_jsonl<T: Serialize>(w: &mut impl Write, records: &[T]) -> IoResult<()> {
    for rec in records {
        let line = serde_json::to_string(rec).map_err(|e| IoError::Format(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Versioned checkpoint. Parameter entries are decimal strings — Rust's
/// shortest round-trip formatting — so save/load reproduces every f64 bit
/// for bit.
#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub version: u32,
    pub task: TaskKind,
    pub f_spec: MappingSpec,
    pub g_spec: MappingSpec,
    pub similarity: Similarity,
    pub weight_features: WeightFeatures,
    pub lambda: f64,
    pub f_data: Vec<String>,
    pub g_data: Vec<String>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// A loaded checkpoint resolved into runtime types.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub task_spec: TaskSpec,
    pub params: ModelParams,
    pub lambda: f64,
}

pub fn checkpoint_to_json(
    task_spec: &TaskSpec,
    params: &ModelParams,
    lambda: f64,
) -> IoResult<String> {
    let encode = |data: &[f64]| data.iter().map(|x| format!("{x}")).collect();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        task: task_spec.kind,
        f_spec: params.f_spec,
        g_spec: params.g_spec,
        similarity: task_spec.similarity,
        weight_features: task_spec.weight_features,
        lambda,
        f_data: encode(params.f.data()),
        g_data: encode(params.g.data()),
    };
    serde_json::to_string_pretty(&file).map_err(|e| IoError::Format(e.to_string()))
}

fn decode_block(spec: &MappingSpec, data: &[String], name: &str) -> IoResult<Matrix> {
    let (rows, cols) = match spec.kind {
        crate::model::MappingKind::Identity => (0, 0),
        crate::model::MappingKind::Linear => (spec.out_dim, spec.in_dim),
        crate::model::MappingKind::Embedding => (spec.in_dim, spec.out_dim),
    };
    if data.len() != rows * cols {
        return Err(IoError::Format(format!(
            "{name} block has {} entries, expected {}",
            data.len(),
            rows * cols
        )));
    }
    let mut values = Vec::with_capacity(data.len());
    for s in data {
        let v: f64 = s
            .parse()
            .map_err(|e| IoError::Format(format!("{name} entry `{s}`: {e}")))?;
        if !v.is_finite() {
            return Err(IoError::Format(format!("{name} entry `{s}` is not finite")));
        }
        values.push(v);
    }
    Matrix::from_data(rows, cols, values).map_err(|e| IoError::Format(e.to_string()))
}

pub fn checkpoint_from_json(bytes: &[u8]) -> IoResult<Checkpoint> {
    let file: CheckpointFile =
        serde_json::from_slice(bytes).map_err(|e| IoError::Format(e.to_string()))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(IoError::Format(format!(
            "unsupported checkpoint version {}",
            file.version
        )));
    }
    let task_spec = TaskSpec::custom(
        file.task,
        file.f_spec,
        file.g_spec,
        file.similarity,
        file.weight_features,
    )
    .map_err(|e| IoError::Format(e.to_string()))?;
    if !file.lambda.is_finite() || file.lambda < 0.0 {
        return Err(IoError::Format(format!("bad lambda {}", file.lambda)));
    }
    let f = decode_block(&file.f_spec, &file.f_data, "f")?;
    let g = decode_block(&file.g_spec, &file.g_data, "g")?;
    Ok(Checkpoint {
        task_spec,
        params: ModelParams {
            f_spec: file.f_spec,
            g_spec: file.g_spec,
            f,
            g,
        },
        lambda: file.lambda,
    })
}
