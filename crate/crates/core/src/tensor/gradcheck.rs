//! Finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::param::{ParamGradients, ParamId, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step `h`.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Elements checked per parameter; larger tensors are subsampled.
    pub max_elements: usize,
    /// Magnitude below which errors are measured against this floor instead
    /// of the gradient itself.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tolerance: 1e-4,
            max_elements: 256,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Elements whose ±h evaluations changed a rectifier's activation
    /// pattern; central differences are meaningless there.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst_element: Option<usize>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| p.max_rel_error >= self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped_kinks).sum()
    }
}

fn evaluate<L>(store: &ParamStore<f64>, loss_fn: &mut L) -> Result<(f64, u64)>
where
    L: for<'g> FnMut(&mut Graph<'g, f64>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    g.set_track_kinks(true);
    let loss = loss_fn(&mut g)?;
    Ok((g.value(loss).data()[0], g.kink_signature()))
}

/// Loss value and analytic parameter gradients of `loss_fn`.
pub fn analytic_gradients<L>(
    store: &ParamStore<f64>,
    mut loss_fn: L,
) -> Result<(f64, ParamGradients<f64>)>
where
    L: for<'g> FnMut(&mut Graph<'g, f64>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = loss_fn(&mut g)?;
    let value = g.value(loss).data()[0];
    Ok((value, g.param_gradients(loss)?))
}

/// Compares `analytic` against central differences of `loss_fn` for each
/// parameter in `params`.
pub fn check_gradients<L>(
    store: &mut ParamStore<f64>,
    params: &[ParamId],
    analytic: &ParamGradients<f64>,
    cfg: &GradCheckConfig,
    mut loss_fn: L,
) -> Result<GradCheckReport>
where
    L: for<'g> FnMut(&mut Graph<'g, f64>) -> Result<Var>,
{
    let (_, base_kinks) = evaluate(store, &mut loss_fn)?;
    let mut report = GradCheckReport {
        tolerance: cfg.tolerance,
        params: Vec::with_capacity(params.len()),
    };
    for (pi, &id) in params.iter().enumerate() {
        let numel = store.value(id).numel();
        let zeros;
        let grad = match analytic.get(id) {
            Some(g) => g,
            None => {
                zeros = vec![0.0; numel];
                &zeros
            }
        };
        let elements: Vec<usize> = if numel <= cfg.max_elements {
            (0..numel).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (pi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut v = sample(&mut rng, numel, cfg.max_elements).into_vec();
            v.sort_unstable();
            v
        };
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            checked: 0,
            skipped_kinks: 0,
            max_rel_error: 0.0,
            worst_element: None,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for e in elements {
            let orig = store.value(id).data()[e];
            store.value_mut(id).data_mut()[e] = orig + cfg.step;
            let (plus, kinks_plus) = evaluate(store, &mut loss_fn)?;
            store.value_mut(id).data_mut()[e] = orig - cfg.step;
            let (minus, kinks_minus) = evaluate(store, &mut loss_fn)?;
            store.value_mut(id).data_mut()[e] = orig;
            if kinks_plus != base_kinks || kinks_minus != base_kinks {
                check.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = grad[e];
            let denom = a.abs().max(numeric.abs()).max(cfg.abs_floor);
            let rel = (a - numeric).abs() / denom;
            check.checked += 1;
            if rel > check.max_rel_error || check.worst_element.is_none() {
                check.max_rel_error = check.max_rel_error.max(rel);
                check.worst_element = Some(e);
                check.worst_analytic = a;
                check.worst_numeric = numeric;
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

/// Analytic-vs-numeric gradient check over `params`.
pub fn grad_check<L>(
    store: &mut ParamStore<f64>,
    params: &[ParamId],
    cfg: &GradCheckConfig,
    mut loss_fn: L,
) -> Result<GradCheckReport>
where
    L: for<'g> FnMut(&mut Graph<'g, f64>) -> Result<Var>,
{
    let (_, analytic) = analytic_gradients(store, &mut loss_fn)?;
    check_gradients(store, params, &analytic, cfg, loss_fn)
}
