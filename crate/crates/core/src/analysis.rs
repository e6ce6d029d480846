//! Head-contribution analysis.
//!
//! The contribution of head `h` to token `i` is `c_{i,h} = ‖ξ_i^h‖₂`, the norm
//! of the head's output after its block of the output projection. Reports
//! hold the median contribution of every (layer, head) over all valid tokens
//! of a sample set, plus the same medians normalized within each layer.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionMask, OpCounter};
use crate::error::{Error, Result};
use crate::mhma::{AttentionOutput, HeadSpec};
use crate::model::Multiformer;
use crate::par::{self, Execution};
use crate::tensor::{Graph, Scalar, Tensor};
use crate::training::{gen_synthetic_batch, SyntheticTaskSpec};

/// `[n, H]` matrix of per-token head contributions.
pub fn head_contribution<F: Scalar>(out: &AttentionOutput<F>) -> Result<Tensor<f64>> {
    if out.heads.is_empty() {
        return Err(Error::InvalidArgument("attention output carries no head captures".into()));
    }
    let n = out.heads[0].xi.rows();
    let h = out.heads.len();
    let mut c = Tensor::zeros(&[n, h]);
    for (k, head) in out.heads.iter().enumerate() {
        if head.xi.rows() != n {
            return Err(Error::Shape(format!("head {k} has {} rows, expected {n}", head.xi.rows())));
        }
        for i in 0..n {
            let sq: f64 = head.xi.row(i).iter().map(|v| v.to_f64_lossy().powi(2)).sum();
            c.data_mut()[i * h + k] = sq.sqrt();
        }
    }
    Ok(c)
}

/// Median of a non-empty slice; the mean of the middle pair for even counts.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Per-layer shares `m_h / Σ m`. An all-zero row gets equal shares.
pub fn normalize_row(row: &[f64]) -> Vec<f64> {
    let total: f64 = row.iter().sum();
    if total > 0.0 {
        row.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / row.len() as f64; row.len()]
    }
}

/// Normalized entropy of a share vector, 1 for a uniform split and 0 when a
/// single head takes everything.
pub fn uniformity(shares: &[f64]) -> f64 {
    if shares.len() < 2 {
        return 1.0;
    }
    let h: f64 = shares.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum();
    h / (shares.len() as f64).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContributionReport {
    /// `[L][H]` medians.
    pub medians: Vec<Vec<f64>>,
    /// `[L][H]` medians divided by their layer sum.
    pub shares: Vec<Vec<f64>>,
    pub specs: Vec<Vec<HeadSpec>>,
    pub sample_count: usize,
    pub token_count: usize,
}

impl ContributionReport {
    pub fn layers(&self) -> usize {
        self.medians.len()
    }

    pub fn heads(&self) -> usize {
        self.medians.first().map_or(0, Vec::len)
    }

    pub fn uniformity(&self) -> Vec<f64> {
        self.shares.iter().map(|r| uniformity(r)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,head,mechanism,median_contribution,normalized_share\n");
        for (l, row) in self.medians.iter().enumerate() {
            for (h, m) in row.iter().enumerate() {
                let _ = writeln!(s, "{},{},\"{}\",{},{}", l + 1, h + 1, self.specs[l][h], m, self.shares[l][h]);
            }
        }
        s
    }

    /// Heatmap of normalized shares: one row per layer, one cell per head.
    /// Cell opacity is the share; the border colour marks the mechanism.
    pub fn to_svg(&self) -> String {
        let (cell, left, top) = (72.0, 70.0, 40.0);
        let w = left + cell * self.heads() as f64 + 20.0;
        let h = top + cell * self.layers() as f64 + 50.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        for hd in 0..self.heads() {
            let x = left + cell * (hd as f64 + 0.5);
            let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">head {}</text>"#, top - 10.0, hd + 1);
        }
        for (l, row) in self.shares.iter().enumerate() {
            let y = top + cell * l as f64;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">layer {}</text>"#,
                left - 8.0,
                y + cell / 2.0 + 4.0,
                l + 1
            );
            for (hd, share) in row.iter().enumerate() {
                let x = left + cell * hd as f64;
                let spec = &self.specs[l][hd];
                let stroke = match spec {
                    HeadSpec::Full => "#808080",
                    HeadSpec::Local { .. } => "#e07b00",
                    HeadSpec::Conv { .. } => "#7b3fb0",
                };
                let _ = writeln!(
                    s,
                    r##"<rect x="{}" y="{}" width="{}" height="{}" fill="#1f4e9c" fill-opacity="{share:.6}" stroke="{stroke}" stroke-width="3"><title>{spec}: median {:.6}, share {share:.4}</title></rect>"##,
                    x + 2.0,
                    y + 2.0,
                    cell - 4.0,
                    cell - 4.0,
                    self.medians[l][hd]
                );
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="middle" font-size="9">{spec}</text>"#,
                    x + cell / 2.0,
                    y + cell - 8.0
                );
            }
        }
        let _ = writeln!(
            s,
            r##"<text x="{left}" y="{}">border: gray full, orange local, purple conv; fill: share of layer ({} samples, {} tokens)</text>"##,
            h - 20.0,
            self.sample_count,
            self.token_count
        );
        s.push_str("</svg>\n");
        s
    }

    pub fn write(&self, csv: &Path, svg: &Path) -> Result<()> {
        fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        fs::write(svg, self.to_svg()).map_err(|e| Error::io(svg, e))
    }
}

/// Pools per-token contributions of every sample and layer into a report.
/// `per_sample[s][l]` is the `[n, H]` matrix of sample `s`, layer `l`, and
/// `masks[s]` marks its valid encoder positions.
pub fn aggregate_contributions(
    per_sample: &[Vec<Tensor<f64>>],
    masks: &[AttentionMask],
    specs: &[Vec<HeadSpec>],
) -> Result<ContributionReport> {
    if per_sample.is_empty() {
        return Err(Error::InvalidArgument("no samples to aggregate".into()));
    }
    if masks.len() != per_sample.len() {
        return Err(Error::Shape(format!("{} masks for {} samples", masks.len(), per_sample.len())));
    }
    let layers = specs.len();
    let heads = specs.first().map_or(0, Vec::len);
    let mut medians = Vec::with_capacity(layers);
    let mut token_count = 0;
    for l in 0..layers {
        let mut pooled = vec![Vec::new(); heads];
        for (sample, mask) in per_sample.iter().zip(masks) {
            let c = sample
                .get(l)
                .ok_or_else(|| Error::Shape(format!("sample is missing layer {}", l + 1)))?;
            let (n, hh) = c.dims2()?;
            if hh != heads || n != mask.len() {
                return Err(Error::Shape(format!("contribution matrix {n}x{hh}, mask {}", mask.len())));
            }
            for i in (0..n).filter(|i| mask.is_valid(*i)) {
                for (h, p) in pooled.iter_mut().enumerate() {
                    p.push(c.at(i, h));
                }
            }
        }
        if l == 0 {
            token_count = pooled.first().map_or(0, Vec::len);
        }
        let row = pooled
            .iter_mut()
            .map(|p| median(p).ok_or_else(|| Error::InvalidArgument("no valid tokens".into())))
            .collect::<Result<Vec<_>>>()?;
        medians.push(row);
    }
    let shares = medians.iter().map(|r| normalize_row(r)).collect();
    Ok(ContributionReport {
        medians,
        shares,
        specs: specs.to_vec(),
        sample_count: per_sample.len(),
        token_count,
    })
}

/// Runs the encoder with capture over `samples` synthetic examples drawn with
/// `seed` and aggregates every layer's head contributions.
pub fn analyze<F: Scalar>(
    model: &Multiformer<F>,
    task: &SyntheticTaskSpec,
    samples: usize,
    seed: u64,
    exec: Execution,
) -> Result<ContributionReport> {
    if samples == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = gen_synthetic_batch::<F>(task, samples, &mut rng)?;
    let results: Vec<Result<(Vec<Tensor<f64>>, AttentionMask)>> = par::map(exec, 0..samples, |b| {
        let ex = batch.example(b);
        let mut g = Graph::new(model.params());
        let x = g.constant(ex.features);
        let run = model.encode_example(&mut g, x, &ex.source_mask, true, &mut OpCounter::new(), &mut None)?;
        let c = run.captures.iter().map(head_contribution).collect::<Result<Vec<_>>>()?;
        Ok((c, run.mask))
    });
    let mut per_sample = Vec::with_capacity(samples);
    let mut masks = Vec::with_capacity(samples);
    for r in results {
        let (c, m) = r?;
        per_sample.push(c);
        masks.push(m);
    }
    aggregate_contributions(&per_sample, &masks, &model.config().encoder_layers)
}
