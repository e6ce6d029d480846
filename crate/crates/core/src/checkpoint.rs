//! Binary checkpoint format.
//!
//! Layout: the magic `MFCKPT1\n`, a little-endian `u64` header length, a
//! UTF-8 header, then every parameter as little-endian `f32` in header order.
//!
//! ```text
//! format_version 1
//! arch_hash <hex>
//! param <name> <d0>x<d1>... <count>
//! meta <key> <value>
//! ```
//!
//! Parameters are listed in lexicographic name order. Values are always
//! stored as `f32`, whatever precision the model computes in.

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::Multiformer;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"MFCKPT1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch_hash: String,
    /// Sorted by name.
    pub params: Vec<StoredParam>,
    /// Free-form `(key, value)` pairs, kept in insertion order.
    pub metadata: Vec<(String, String)>,
}

fn format_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".to_string()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "scalar" {
        return Some(Vec::new());
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}

fn header_err(msg: impl Into<String>) -> Error {
    CheckpointError::Header(msg.into()).into()
}

impl Checkpoint {
    /// Snapshot of a model's parameters (rounded to `f32`).
    pub fn from_model<F: Scalar>(model: &Multiformer<F>) -> Self {
        let store = model.params();
        let params = store
            .sorted_ids()
            .into_iter()
            .map(|id| {
                let p = store.get(id);
                StoredParam {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().iter().map(|v| v.to_f64_lossy() as f32).collect(),
                }
            })
            .collect();
        Checkpoint {
            arch_hash: model.config().architecture_hash(),
            params,
            metadata: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.push((key.into(), value.into()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn param(&self, name: &str) -> Option<&StoredParam> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("format_version {FORMAT_VERSION}\narch_hash {}\n", self.arch_hash);
        let mut sorted = true;
        for w in self.params.windows(2) {
            sorted &= w[0].name < w[1].name;
        }
        if !sorted {
            return Err(header_err("parameters must be unique and sorted by name"));
        }
        for p in &self.params {
            if p.name.is_empty() || p.name.contains(char::is_whitespace) {
                return Err(header_err(format!("invalid parameter name {:?}", p.name)));
            }
            let count: usize = p.shape.iter().product();
            if count != p.values.len() {
                return Err(CheckpointError::Parameter {
                    name: p.name.clone(),
                    message: format!("shape {:?} holds {count} values, found {}", p.shape, p.values.len()),
                }
                .into());
            }
            header.push_str(&format!("param {} {} {count}\n", p.name, format_shape(&p.shape)));
        }
        for (k, v) in &self.metadata {
            if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(header_err(format!("invalid metadata entry {k:?}")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let total: usize = self.params.iter().map(|p| p.values.len()).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 4 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for p in &self.params {
            for v in &p.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let rest = &bytes[MAGIC.len()..];
        if rest.len() < 8 {
            return Err(CheckpointError::Truncated { expected: 8, found: rest.len() }.into());
        }
        let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < hlen {
            return Err(CheckpointError::Truncated { expected: hlen, found: rest.len() }.into());
        }
        let header = std::str::from_utf8(&rest[..hlen]).map_err(|_| header_err("header is not UTF-8"))?;
        let payload = &rest[hlen..];

        let mut version = None;
        let mut arch_hash = None;
        let mut entries = Vec::new();
        let mut metadata = Vec::new();
        for (i, line) in header.lines().enumerate() {
            let (tag, body) = line.split_once(' ').unwrap_or((line, ""));
            match tag {
                "format_version" => {
                    let v: u32 = body.parse().map_err(|_| header_err(format!("line {}: bad version", i + 1)))?;
                    if v != FORMAT_VERSION {
                        return Err(CheckpointError::Version(v).into());
                    }
                    version = Some(v);
                }
                "arch_hash" => arch_hash = Some(body.to_string()),
                "param" => {
                    let parts: Vec<&str> = body.split(' ').collect();
                    let bad = || header_err(format!("line {}: malformed parameter entry", i + 1));
                    if parts.len() != 3 {
                        return Err(bad());
                    }
                    let shape = parse_shape(parts[1]).ok_or_else(bad)?;
                    let count: usize = parts[2].parse().map_err(|_| bad())?;
                    if shape.iter().product::<usize>() != count {
                        return Err(CheckpointError::Parameter {
                            name: parts[0].to_string(),
                            message: format!("shape {} does not hold {count} values", parts[1]),
                        }
                        .into());
                    }
                    entries.push((parts[0].to_string(), shape, count));
                }
                "meta" => {
                    let (k, v) = body.split_once(' ').unwrap_or((body, ""));
                    metadata.push((k.to_string(), v.to_string()));
                }
                _ => return Err(header_err(format!("line {}: unknown entry {tag:?}", i + 1))),
            }
        }
        if version.is_none() {
            return Err(header_err("missing format_version"));
        }
        let arch_hash = arch_hash.ok_or_else(|| header_err("missing arch_hash"))?;
        for w in entries.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(header_err(format!("parameter {} out of order", w[1].0)));
            }
        }
        let total: usize = entries.iter().map(|e| e.2).sum();
        if payload.len() != 4 * total {
            return Err(CheckpointError::Truncated { expected: 4 * total, found: payload.len() }.into());
        }
        let mut offset = 0;
        let params = entries
            .into_iter()
            .map(|(name, shape, count)| {
                let values = payload[offset..offset + 4 * count]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                offset += 4 * count;
                StoredParam { name, shape, values }
            })
            .collect();
        Ok(Checkpoint { arch_hash, params, metadata })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Copies the stored values into `model`, checking the architecture hash,
    /// parameter names and shapes.
    pub fn apply<F: Scalar>(&self, model: &mut Multiformer<F>) -> Result<()> {
        let expected = model.config().architecture_hash();
        if self.arch_hash != expected {
            return Err(CheckpointError::HashMismatch { expected, found: self.arch_hash.clone() }.into());
        }
        let store = model.params_mut();
        if store.len() != self.params.len() {
            return Err(CheckpointError::Parameter {
                name: "*".into(),
                message: format!("checkpoint has {} parameters, model has {}", self.params.len(), store.len()),
            }
            .into());
        }
        for p in &self.params {
            let id = store.id(&p.name).ok_or_else(|| CheckpointError::Parameter {
                name: p.name.clone(),
                message: "not present in model".into(),
            })?;
            let value = store.value_mut(id);
            if value.shape() != p.shape.as_slice() {
                return Err(CheckpointError::Parameter {
                    name: p.name.clone(),
                    message: format!("shape {:?} in checkpoint, {:?} in model", p.shape, value.shape()),
                }
                .into());
            }
            *value = Tensor::new(p.shape.clone(), p.values.iter().map(|v| F::from_f64_lossy(*v as f64)).collect())?;
        }
        Ok(())
    }
}

impl Checkpoint {
    /// Copies every stored parameter whose name and shape match one in
    /// `model`, ignoring the architecture hash. Returns how many were copied;
    /// copying none is an error. This is how a model is warm-started from a
    /// related one (for example a shared encoder).
    pub fn apply_matching<F: Scalar>(&self, model: &mut Multiformer<F>) -> Result<usize> {
        let store = model.params_mut();
        let mut copied = 0;
        for p in &self.params {
            let Some(id) = store.id(&p.name) else { continue };
            let value = store.value_mut(id);
            if value.shape() != p.shape.as_slice() {
                continue;
            }
            *value = Tensor::new(p.shape.clone(), p.values.iter().map(|v| F::from_f64_lossy(*v as f64)).collect())?;
            copied += 1;
        }
        if copied == 0 {
            return Err(CheckpointError::Parameter {
                name: "*".into(),
                message: "no parameter of the checkpoint matches the model".into(),
            }
            .into());
        }
        Ok(copied)
    }
}

/// Writes `model` to `path` with the given metadata.
pub fn save_checkpoint<F: Scalar>(model: &Multiformer<F>, path: impl AsRef<Path>, metadata: &[(&str, String)]) -> Result<()> {
    let mut ckpt = Checkpoint::from_model(model);
    for (k, v) in metadata {
        ckpt.metadata.push((k.to_string(), v.clone()));
    }
    ckpt.save(path)
}

/// Loads `path` into `model`.
pub fn load_checkpoint<F: Scalar>(model: &mut Multiformer<F>, path: impl AsRef<Path>) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.apply(model)?;
    Ok(ckpt)
}

/// Elementwise mean of checkpoints. Each element's values are summed in
/// `f64` in sorted order, so the result does not depend on input order.
pub fn average(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::InvalidArgument("no checkpoints to average".into()))?;
    for c in &checkpoints[1..] {
        if c.arch_hash != first.arch_hash {
            return Err(CheckpointError::HashMismatch {
                expected: first.arch_hash.clone(),
                found: c.arch_hash.clone(),
            }
            .into());
        }
        if c.params.len() != first.params.len() {
            return Err(CheckpointError::Parameter {
                name: "*".into(),
                message: format!("{} parameters vs {}", c.params.len(), first.params.len()),
            }
            .into());
        }
        for (a, b) in first.params.iter().zip(&c.params) {
            if a.name != b.name || a.shape != b.shape {
                return Err(CheckpointError::Parameter {
                    name: b.name.clone(),
                    message: format!("expected {} {:?}, found {} {:?}", a.name, a.shape, b.name, b.shape),
                }
                .into());
            }
        }
    }
    let k = checkpoints.len() as f64;
    let mut column = Vec::with_capacity(checkpoints.len());
    let params = first
        .params
        .iter()
        .enumerate()
        .map(|(pi, p)| {
            let values = (0..p.values.len())
                .map(|e| {
                    column.clear();
                    column.extend(checkpoints.iter().map(|c| c.params[pi].values[e] as f64));
                    column.sort_by(f64::total_cmp);
                    (column.iter().sum::<f64>() / k) as f32
                })
                .collect();
            StoredParam { name: p.name.clone(), shape: p.shape.clone(), values }
        })
        .collect();
    let mut metadata = Vec::new();
    if let Some(task) = first.meta("task") {
        if checkpoints.iter().all(|c| c.meta("task") == Some(task)) {
            metadata.push(("task".to_string(), task.to_string()));
        }
    }
    Ok(Checkpoint { arch_hash: first.arch_hash.clone(), params, metadata })
}

/// Loads, averages and saves; the output records each source path.
pub fn average_checkpoints<P: AsRef<Path>>(paths: &[P], out: impl AsRef<Path>) -> Result<Checkpoint> {
    let loaded = paths.iter().map(Checkpoint::load).collect::<Result<Vec<_>>>()?;
    let mut avg = average(&loaded)?;
    for p in paths {
        avg.metadata.push(("source".into(), p.as_ref().display().to_string()));
    }
    avg.save(out)?;
    Ok(avg)
}

/// Indices of the best entry (lowest loss, earliest on ties) and up to
/// `radius` neighbours on each side, clipped at the series ends.
pub fn select_around_best(losses: &[f64], radius: usize) -> Result<std::ops::Range<usize>> {
    let mut best: Option<usize> = None;
    for (i, l) in losses.iter().enumerate() {
        if l.is_nan() {
            continue;
        }
        if best.is_none_or(|b| *l < losses[b]) {
            best = Some(i);
        }
    }
    let b = best.ok_or_else(|| Error::InvalidArgument("no finite losses to select from".into()))?;
    Ok(b.saturating_sub(radius)..(b + radius + 1).min(losses.len()))
}

/// Reads a metrics CSV with a `step` column and a `valid_loss` (preferred)
/// or `loss` column, keeps rows whose `ckpt_<step>.mfc` exists in `dir`, and
/// returns the checkpoints around the lowest loss.
pub fn select_from_metrics(metrics: &Path, dir: &Path, radius: usize) -> Result<Vec<std::path::PathBuf>> {
    let file = fs::File::open(metrics).map_err(|e| Error::io(metrics, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let step_col = col("step").ok_or_else(|| Error::InvalidArgument(format!("{} has no step column", metrics.display())))?;
    let loss_col = col("valid_loss")
        .or_else(|| col("loss"))
        .ok_or_else(|| Error::InvalidArgument(format!("{} has no valid_loss or loss column", metrics.display())))?;
    let mut rows: Vec<(u64, f64, std::path::PathBuf)> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim().to_string();
        let bad = |what: &str| Error::Parse { path: metrics.to_path_buf(), line: i + 2, message: format!("bad {what}") };
        let step: u64 = field(step_col).parse().map_err(|_| bad("step"))?;
        let loss: f64 = field(loss_col).parse().map_err(|_| bad("loss"))?;
        let path = dir.join(format!("ckpt_{step}.mfc"));
        if path.is_file() {
            rows.push((step, loss, path));
        }
    }
    rows.sort_by_key(|r| r.0);
    rows.dedup_by_key(|r| r.0);
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no row of {} has a matching checkpoint in {}",
            metrics.display(),
            dir.display()
        )));
    }
    let losses: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let range = select_around_best(&losses, radius)?;
    Ok(rows[range].iter().map(|r| r.2.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            arch_hash: "abc".into(),
            params: vec![
                StoredParam { name: "a".into(), shape: vec![2], values: vec![1.0, -2.5] },
                StoredParam { name: "b".into(), shape: vec![], values: vec![0.25] },
            ],
            metadata: vec![("step".into(), "7".into())],
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn distinct_error_kinds() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(CheckpointError::BadMagic))));
        let cut = &bytes[..bytes.len() - 2];
        assert!(matches!(Checkpoint::from_bytes(cut), Err(Error::Checkpoint(CheckpointError::Truncated { .. }))));
    }

    #[test]
    fn selection_window() {
        let l = [5.0, 4.0, 3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(select_around_best(&l, 3).unwrap(), 1..8);
        assert_eq!(select_around_best(&[1.0, 2.0, 3.0, 4.0, 5.0], 3).unwrap(), 0..4);
        assert_eq!(select_around_best(&[3.0, 2.0, 1.0], 3).unwrap(), 0..3);
        assert!(select_around_best(&[], 3).is_err());
    }
}
