//! Architecture files and bundled presets.
//!
//! An architecture file is TOML with model-level scalars plus an ordered list
//! of encoder blocks, each repeating one head mix:
//!
//! ```toml
//! d_model = 256
//! heads = 4
//! decoder_layers = 6
//! ffn_dim = 2048
//! vocab_size = 8000
//! feature_dim = 80
//!
//! [[encoder_layers]]
//! repeat = 6
//! heads = ["local(64)", "3 x conv(5,2)"]
//! ```
//!
//! A head entry may carry a multiplier (`"3 x conv(5,2)"`), mirroring the
//! `N × Mechanism` notation used to describe these models.

use std::fmt;
use std::path::Path;

use serde::Deserialize;
use toml::Spanned;

use crate::error::{Error, Result};
use crate::mhma::HeadSpec;
use crate::model::ModelConfig;

/// A run of identical encoder layers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub repeat: usize,
    pub heads: Vec<HeadSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureFile {
    pub name: String,
    pub d_model: usize,
    pub heads: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub dropout: f64,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub blocks: Vec<Block>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBlock {
    repeat: Spanned<usize>,
    heads: Spanned<Vec<Spanned<String>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    name: Option<String>,
    d_model: usize,
    heads: usize,
    decoder_layers: usize,
    ffn_dim: usize,
    vocab_size: usize,
    feature_dim: usize,
    #[serde(default)]
    dropout: f64,
    #[serde(default = "default_source_len")]
    max_source_len: usize,
    #[serde(default = "default_target_len")]
    max_target_len: usize,
    /// Optional cross-check of the summed block repeats.
    total_encoder_layers: Option<Spanned<usize>>,
    encoder_layers: Spanned<Vec<Spanned<RawBlock>>>,
}

fn default_source_len() -> usize {
    4096
}

fn default_target_len() -> usize {
    1024
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|b| *b == b'\n').count() + 1
}

/// Parses one head entry, expanding an optional `N x` multiplier.
fn parse_head_entry(s: &str) -> std::result::Result<Vec<HeadSpec>, String> {
    let t = s.trim();
    let split = t
        .char_indices()
        .find(|(_, c)| *c == 'x' || *c == 'X' || *c == '×')
        .filter(|(i, _)| *i > 0 && t[..*i].trim().chars().all(|c| c.is_ascii_digit()));
    let (count, spec) = match split {
        Some((i, c)) => {
            let n: usize = t[..i].trim().parse().map_err(|_| format!("bad multiplier in {s:?}"))?;
            (n, &t[i + c.len_utf8()..])
        }
        None => (1, t),
    };
    if count == 0 {
        return Err(format!("multiplier 0 in {s:?}"));
    }
    let spec: HeadSpec = spec.parse().map_err(|e: Error| e.to_string())?;
    Ok(vec![spec; count])
}

impl ArchitectureFile {
    /// Parses architecture text; `origin` names the source in error messages.
    pub fn parse_str(text: &str, origin: &str) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse { path: origin.into(), line, message };
        let raw: RawFile = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| line_of(text, s.start));
            perr(line, e.message().to_string())
        })?;
        if raw.heads == 0 {
            return Err(perr(0, "heads must be positive".into()));
        }
        if raw.encoder_layers.get_ref().is_empty() {
            let line = line_of(text, raw.encoder_layers.span().start);
            return Err(perr(line, "at least one encoder block is required".into()));
        }
        let mut blocks = Vec::new();
        for block in raw.encoder_layers.get_ref() {
            let b = block.get_ref();
            let mut heads = Vec::new();
            for h in b.heads.get_ref() {
                let parsed = parse_head_entry(h.get_ref()).map_err(|m| perr(line_of(text, h.span().start), m))?;
                heads.extend(parsed);
            }
            if heads.len() != raw.heads {
                return Err(perr(
                    line_of(text, b.heads.span().start),
                    format!("block lists {} head specs, expected {}", heads.len(), raw.heads),
                ));
            }
            if *b.repeat.get_ref() == 0 {
                return Err(perr(line_of(text, b.repeat.span().start), "repeat must be at least 1".into()));
            }
            blocks.push(Block { repeat: *b.repeat.get_ref(), heads });
        }
        let total: usize = blocks.iter().map(|b| b.repeat).sum();
        if let Some(expected) = &raw.total_encoder_layers {
            if *expected.get_ref() != total {
                return Err(perr(
                    line_of(text, expected.span().start),
                    format!("block repeats sum to {total}, total_encoder_layers says {}", expected.get_ref()),
                ));
            }
        }
        let arch = ArchitectureFile {
            name: raw.name.unwrap_or_else(|| origin.to_string()),
            d_model: raw.d_model,
            heads: raw.heads,
            decoder_layers: raw.decoder_layers,
            ffn_dim: raw.ffn_dim,
            vocab_size: raw.vocab_size,
            feature_dim: raw.feature_dim,
            dropout: raw.dropout,
            max_source_len: raw.max_source_len,
            max_target_len: raw.max_target_len,
            blocks,
        };
        arch.to_model_config().map_err(|e| perr(0, e.to_string()))?;
        Ok(arch)
    }

    pub fn encoder_layer_count(&self) -> usize {
        self.blocks.iter().map(|b| b.repeat).sum()
    }

    /// Expands blocks into per-layer head lists and validates the result.
    pub fn to_model_config(&self) -> Result<ModelConfig> {
        let encoder_layers = self
            .blocks
            .iter()
            .flat_map(|b| std::iter::repeat_n(b.heads.clone(), b.repeat))
            .collect();
        let cfg = ModelConfig {
            d_model: self.d_model,
            heads: self.heads,
            encoder_layers,
            decoder_layers: self.decoder_layers,
            ffn_dim: self.ffn_dim,
            vocab_size: self.vocab_size,
            input_feature_dim: self.feature_dim,
            dropout: self.dropout,
            max_source_len: self.max_source_len,
            max_target_len: self.max_target_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// A gradient-checkable miniature: `d_model` 16, one layer per block,
    /// one decoder layer, local windows capped at 2, and the same head mix.
    pub fn tiny(&self) -> Self {
        let blocks = self
            .blocks
            .iter()
            .map(|b| Block {
                repeat: 1,
                heads: b
                    .heads
                    .iter()
                    .map(|h| match h {
                        HeadSpec::Local { window } => HeadSpec::Local { window: (*window).min(2) },
                        other => *other,
                    })
                    .collect(),
            })
            .collect();
        ArchitectureFile {
            name: format!("{}_tiny", self.name),
            d_model: 16,
            heads: self.heads,
            decoder_layers: 1,
            ffn_dim: 16,
            vocab_size: 7,
            feature_dim: 3,
            dropout: 0.0,
            max_source_len: 64,
            max_target_len: 16,
            blocks,
        }
    }
}

impl fmt::Display for ArchitectureFile {
    /// Writes the architecture back out in file syntax.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "name = {:?}", self.name)?;
        writeln!(f, "d_model = {}", self.d_model)?;
        writeln!(f, "heads = {}", self.heads)?;
        writeln!(f, "decoder_layers = {}", self.decoder_layers)?;
        writeln!(f, "ffn_dim = {}", self.ffn_dim)?;
        writeln!(f, "vocab_size = {}", self.vocab_size)?;
        writeln!(f, "feature_dim = {}", self.feature_dim)?;
        writeln!(f, "dropout = {:?}", self.dropout)?;
        writeln!(f, "max_source_len = {}", self.max_source_len)?;
        writeln!(f, "max_target_len = {}", self.max_target_len)?;
        for b in &self.blocks {
            let heads: Vec<String> = b.heads.iter().map(|h| format!("{:?}", h.to_string())).collect();
            writeln!(f, "\n[[encoder_layers]]\nrepeat = {}\nheads = [{}]", b.repeat, heads.join(", "))?;
        }
        Ok(())
    }
}

/// Names and sources of the bundled architectures.
pub const PRESETS: &[(&str, &str)] = &[
    ("baseline", include_str!("../presets/baseline.toml")),
    ("local_attention", include_str!("../presets/local_attention.toml")),
    ("conv_attention", include_str!("../presets/conv_attention.toml")),
    ("multiformer_lc", include_str!("../presets/multiformer_lc.toml")),
    ("multiformer_v1", include_str!("../presets/multiformer_v1.toml")),
    ("multiformer_v2", include_str!("../presets/multiformer_v2.toml")),
    ("toy_baseline", include_str!("../presets/toy_baseline.toml")),
    ("toy_local_attention", include_str!("../presets/toy_local_attention.toml")),
    ("toy_conv_attention", include_str!("../presets/toy_conv_attention.toml")),
    ("toy_multiformer_lc", include_str!("../presets/toy_multiformer_lc.toml")),
    ("toy_multiformer_v1", include_str!("../presets/toy_multiformer_v1.toml")),
    ("toy_multiformer_v2", include_str!("../presets/toy_multiformer_v2.toml")),
];

/// Looks up a bundled architecture by name.
pub fn preset(name: &str) -> Result<ArchitectureFile> {
    let (n, text) = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?;
    ArchitectureFile::parse_str(text, &format!("preset:{n}"))
}

/// Reads an architecture file from disk.
pub fn parse_architecture(path: impl AsRef<Path>) -> Result<ArchitectureFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ArchitectureFile::parse_str(&text, &path.display().to_string())
}

/// Treats `spec` as a path if such a file exists or it looks like one, else
/// as a preset name.
pub fn resolve_architecture(spec: &str) -> Result<ArchitectureFile> {
    let looks_like_path = spec.contains(std::path::MAIN_SEPARATOR) || spec.contains('/') || spec.ends_with(".toml");
    if looks_like_path || Path::new(spec).is_file() {
        parse_architecture(spec)
    } else if PRESETS.iter().any(|(n, _)| *n == spec) {
        preset(spec)
    } else {
        Err(Error::Config(format!("{spec:?} is neither an architecture file nor a preset")))
    }
}

/// Task file: the synthetic task plus optional training overrides.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFile {
    pub task: crate::training::SyntheticTaskSpec,
    #[serde(default)]
    pub train: crate::training::TrainConfig,
}

impl TaskFile {
    pub fn parse_str(text: &str, origin: &str) -> Result<Self> {
        let tf: TaskFile = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.into(),
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        tf.task.validate()?;
        tf.train.validate()?;
        Ok(tf)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TaskFile::parse_str(&text, &path.display().to_string())
    }
}

/// The task the toy presets are sized for.
pub const TOY_TASK: &str = include_str!("../presets/toy_task.toml");
