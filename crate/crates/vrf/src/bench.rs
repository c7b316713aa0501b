//! k-NN query latency.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use vrf_core::knn::ExactKnn;
use vrf_core::outputs::normalize_features;
use vrf_core::Matrix;

use crate::error::Result;

/// Random unit vectors, `rows x dim`.
pub fn random_unit_rows(rows: usize, dim: usize, seed: u64) -> Result<Matrix<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..rows * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Ok(normalize_features(&Matrix::from_vec(rows, dim, data)?)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub members: usize,
    pub dim: usize,
    pub k: usize,
    pub queries: usize,
    pub kernel: &'static str,
    /// Per-query latency of one-at-a-time queries, in milliseconds.
    pub single_median_ms: f64,
    pub single_p90_ms: f64,
    /// Wall time of each batch run divided by the number of queries.
    pub batch_ms_per_query: Vec<f64>,
    pub batch_median_ms: f64,
    /// Relative spread (max - min) / median over the batch runs.
    pub batch_spread: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Times `single` one-at-a-time queries and `repeats` batch runs over all
/// of `queries`, on the calling thread.
pub fn run(engine: &ExactKnn, queries: &Matrix<f32>, k: usize, single: usize, repeats: usize) -> Result<BenchReport> {
    let mut lat = Vec::with_capacity(single.min(queries.rows()));
    for q in queries.iter_rows().take(single) {
        let t = Instant::now();
        std::hint::black_box(engine.kth_distance(q, k)?);
        lat.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let single_median_ms = median(&mut lat);
    let single_p90_ms = lat
        .get(((lat.len() as f64 * 0.9) as usize).min(lat.len().saturating_sub(1)))
        .copied()
        .unwrap_or(f64::NAN);

    let mut batch = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        std::hint::black_box(engine.kth_distances(queries, k)?);
        batch.push(t.elapsed().as_secs_f64() * 1e3 / queries.rows().max(1) as f64);
    }
    let mut sorted = batch.clone();
    let batch_median_ms = median(&mut sorted);
    let batch_spread = (sorted[sorted.len() - 1] - sorted[0]) / batch_median_ms;
    Ok(BenchReport {
        members: engine.len(),
        dim: engine.dim(),
        k,
        queries: queries.rows(),
        kernel: ExactKnn::kernel_name(),
        single_median_ms,
        single_p90_ms,
        batch_ms_per_query: batch,
        batch_median_ms,
        batch_spread,
    })
}
