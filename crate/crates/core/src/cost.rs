//! Per-mechanism cost measurement: score products and wall time of one
//! attention head on a random sequence.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionMask, OpCounter};
use crate::error::Result;
use crate::mhma::{mhma_forward, HeadSpec, MhmaWeights};
use crate::tensor::{Graph, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadCost {
    pub score_products: u64,
    /// Fastest of the timed repetitions.
    pub wall: Duration,
}

/// Forward cost of a single `spec` head of width `head_dim` over `n` tokens.
pub fn head_cost(spec: HeadSpec, n: usize, head_dim: usize, repeats: usize, seed: u64) -> Result<HeadCost> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let specs = [spec];
    let weights = MhmaWeights::register(&mut store, "bench", head_dim, &specs, &mut rng)?;
    let x: Tensor<f32> = Tensor::from_fn(&[n, head_dim], |_| rng.random_range(-1.0..1.0));
    let mask = AttentionMask::all(n);
    let mut best = Duration::MAX;
    let mut count = 0;
    for _ in 0..repeats.max(1) {
        let mut counter = OpCounter::new();
        let start = Instant::now();
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        mhma_forward(&mut g, xv, &specs, &weights, &mask, &mut counter, false)?;
        best = best.min(start.elapsed());
        count = counter.score_products;
    }
    Ok(HeadCost { score_products: count, wall: best })
}
