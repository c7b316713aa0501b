//! Exact k-th nearest neighbor distance by brute force.
//!
//! The scan computes approximate squared distances `|q|^2 + |m|^2 - 2<q,m>`
//! with `f32` SIMD dot products. Members are stored a second time in panels
//! of 16 (coordinate-major within a panel), so one broadcast-FMA step yields
//! 16 dot products at once; a step covers 8 queries x 32 members. Every
//! approximate value is within `slack` of the true squared distance (`slack`
//! is a forward error bound for the `f32` dot product), so all members whose
//! approximate value lies within `2 * slack` of the k-th smallest approximate
//! value form a superset of the true k nearest. Those candidates are
//! re-scored as `sum (q_i - m_i)^2` in `f64`, which makes the returned
//! distance exact and independent of the kernel, the blocking, and the batch
//! a query arrived in.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::{Error, Matrix, Result};

const PANEL: usize = 16;
/// Members per kernel step (two panels).
const STEP: usize = 2 * PANEL;
/// Queries per kernel step.
const QUERY_TILE: usize = 8;
const QUERY_CHUNK: usize = 256;
const BLOCK_BYTES: usize = 512 * 1024;

/// Brute-force exact k-NN over a fixed set of member rows.
#[derive(Debug, Clone)]
pub struct ExactKnn {
    dim: usize,
    len: usize,
    /// Row-major `len x dim`.
    rows: Vec<f32>,
    /// Element `j * 16 + l` of panel `p` is coordinate `j` of member
    /// `16 * p + l`. Zero padded to a whole number of steps.
    panels: Vec<f32>,
    sq_norms: Vec<f64>,
    max_norm: f64,
}

impl PartialEq for ExactKnn {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.len == other.len && self.rows == other.rows
    }
}

impl ExactKnn {
    pub fn new(members: &Matrix<f32>) -> Self {
        let dim = members.cols();
        let len = members.rows();
        let mut panels = alloc::vec![0.0f32; len.div_ceil(STEP) * STEP * dim];
        let mut sq_norms = Vec::with_capacity(len);
        for (i, row) in members.iter_rows().enumerate() {
            let base = (i / PANEL) * PANEL * dim + i % PANEL;
            for (j, &v) in row.iter().enumerate() {
                panels[base + j * PANEL] = v;
            }
            sq_norms.push(row.iter().map(|&v| v as f64 * v as f64).sum::<f64>());
        }
        let max_norm = libm::sqrt(sq_norms.iter().copied().fold(0.0, f64::max));
        ExactKnn {
            dim,
            len,
            rows: members.as_slice().to_vec(),
            panels,
            sq_norms,
            max_norm,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn member(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Copies the member rows back out.
    pub fn members(&self) -> Matrix<f32> {
        Matrix::from_vec(self.len, self.dim, self.rows.clone()).expect("consistent shape")
    }

    /// Distance from `query` to its k-th nearest member (1-based `k`).
    pub fn kth_distance(&self, query: &[f32], k: usize) -> Result<f64> {
        let q = Matrix::from_vec(1, query.len(), query.to_vec())?;
        Ok(self.kth_distances(&q, k)?[0])
    }

    /// Row-wise [`kth_distance`](Self::kth_distance); output order follows
    /// the query rows.
    pub fn kth_distances(&self, queries: &Matrix<f32>, k: usize) -> Result<Vec<f64>> {
        if self.len == 0 {
            return Err(Error::EmptyIndex);
        }
        if k == 0 || k > self.len {
            return Err(Error::InvalidParameter(alloc::format!(
                "k = {k} outside 1..={}",
                self.len
            )));
        }
        if queries.cols() != self.dim {
            return Err(Error::ShapeMismatch {
                what: "query dimension",
                expected: self.dim,
                found: queries.cols(),
            });
        }
        for (row, q) in queries.iter_rows().enumerate() {
            if q.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "query", row });
            }
        }

        let kernel = Kernel::detect();
        let dim = self.dim;
        let steps = self.len.div_ceil(STEP);
        let step_len = STEP * dim;
        let block_steps = (BLOCK_BYTES / 4 / step_len.max(1)).max(1);
        let slack_terms = (dim + PANEL) as f64;
        let mut out = Vec::with_capacity(queries.rows());
        let mut qbuf = alloc::vec![0.0f32; QUERY_CHUNK * dim];
        let mut dots = [[0.0f32; STEP]; QUERY_TILE];

        let mut start = 0;
        while start < queries.rows() {
            let n = (queries.rows() - start).min(QUERY_CHUNK);
            let tiles = n.div_ceil(QUERY_TILE);
            qbuf[..tiles * QUERY_TILE * dim].fill(0.0);
            let mut collectors = Vec::with_capacity(n);
            for a in 0..n {
                let q = queries.row(start + a);
                qbuf[a * dim..(a + 1) * dim].copy_from_slice(q);
                let q_sq: f64 = q.iter().map(|&v| v as f64 * v as f64).sum();
                let slack =
                    4.0 * slack_terms * f32::EPSILON as f64 * libm::sqrt(q_sq) * self.max_norm + 1e-12;
                collectors.push(Collector::new(k, q_sq, slack));
            }

            let mut block = 0;
            while block < steps {
                let block_end = (block + block_steps).min(steps);
                for t in 0..tiles {
                    let q = &qbuf[t * QUERY_TILE * dim..(t + 1) * QUERY_TILE * dim];
                    let live = QUERY_TILE.min(n - t * QUERY_TILE);
                    for s in block..block_end {
                        kernel.step(q, &self.panels[s * step_len..(s + 1) * step_len], dim, &mut dots);
                        let m0 = s * STEP;
                        let norms = &self.sq_norms[m0..(m0 + STEP).min(self.len)];
                        for (a, row) in dots[..live].iter().enumerate() {
                            collectors[t * QUERY_TILE + a].offer_row(row, norms, m0);
                        }
                    }
                }
                block = block_end;
            }

            for (a, c) in collectors.into_iter().enumerate() {
                let q = queries.row(start + a);
                out.push(c.finish(|i| exact_sq_distance(q, self.member(i as usize))));
            }
            start += n;
        }
        Ok(out)
    }

    pub fn kernel_name() -> &'static str {
        Kernel::detect().name()
    }
}

fn exact_sq_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

fn by_value(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    a.0.total_cmp(&b.0)
}

/// Keeps every member whose approximate squared distance may still be among
/// the k smallest.
struct Collector {
    k: usize,
    q_sq: f64,
    slack: f64,
    bound: f64,
    cap: usize,
    cands: Vec<(f64, u32)>,
}

impl Collector {
    fn new(k: usize, q_sq: f64, slack: f64) -> Self {
        let cap = 2 * k + 64;
        Collector {
            k,
            q_sq,
            slack,
            bound: f64::INFINITY,
            cap,
            cands: Vec::with_capacity(cap),
        }
    }

    #[inline]
    fn offer(&mut self, s: f64, idx: u32) {
        if s <= self.bound {
            self.cands.push((s, idx));
            if self.cands.len() >= self.cap {
                self.tighten();
            }
        }
    }

    /// Offers one kernel row, skipping it when no member can qualify.
    #[inline]
    fn offer_row(&mut self, dots: &[f32; STEP], norms: &[f64], m0: usize) {
        let (q_sq, bound) = (self.q_sq, self.bound);
        let hit = norms
            .iter()
            .zip(dots)
            .fold(false, |h, (&n, &d)| h | (q_sq + n - 2.0 * d as f64 <= bound));
        if hit {
            for (b, (&n, &d)) in norms.iter().zip(dots).enumerate() {
                self.offer(q_sq + n - 2.0 * d as f64, (m0 + b) as u32);
            }
        }
    }

    fn tighten(&mut self) {
        if self.cands.len() < self.k {
            return;
        }
        self.cands.select_nth_unstable_by(self.k - 1, by_value);
        self.bound = self.cands[self.k - 1].0 + 2.0 * self.slack;
        let bound = self.bound;
        self.cands.retain(|c| c.0 <= bound);
        self.cap = (2 * self.cands.len()).max(2 * self.k + 64);
    }

    fn finish(mut self, exact: impl Fn(u32) -> f64) -> f64 {
        self.tighten();
        for c in self.cands.iter_mut() {
            c.0 = exact(c.1);
        }
        let k = self.k;
        self.cands.select_nth_unstable_by(k - 1, by_value);
        libm::sqrt(self.cands[k - 1].0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kernel {
    Portable,
    #[cfg(target_arch = "x86_64")]
    Avx2,
    #[cfg(target_arch = "x86_64")]
    Avx512,
}

impl Kernel {
    fn detect() -> Self {
        #[cfg(all(target_arch = "x86_64", feature = "std"))]
        {
            if std::is_x86_feature_detected!("avx512f") {
                return Kernel::Avx512;
            }
            if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                return Kernel::Avx2;
            }
        }
        #[cfg(all(target_arch = "x86_64", not(feature = "std")))]
        {
            if cfg!(target_feature = "avx512f") {
                return Kernel::Avx512;
            }
            if cfg!(all(target_feature = "avx2", target_feature = "fma")) {
                return Kernel::Avx2;
            }
        }
        Kernel::Portable
    }

    fn name(self) -> &'static str {
        match self {
            Kernel::Portable => "portable",
            #[cfg(target_arch = "x86_64")]
            Kernel::Avx2 => "avx2+fma",
            #[cfg(target_arch = "x86_64")]
            Kernel::Avx512 => "avx512f",
        }
    }

    /// `out[a][b] = <q_a, m_b>` for 8 query rows of length `dim` and the 32
    /// members of two consecutive panels.
    #[inline]
    fn step(self, q: &[f32], p: &[f32], dim: usize, out: &mut [[f32; STEP]; QUERY_TILE]) {
        assert!(q.len() >= QUERY_TILE * dim && p.len() >= STEP * dim);
        match self {
            Kernel::Portable => step_portable(q, p, dim, out),
            // SAFETY: detect() only selects these when the CPU supports them;
            // the assert above covers every load.
            #[cfg(target_arch = "x86_64")]
            Kernel::Avx2 => unsafe { x86::step_avx2(q, p, dim, out) },
            #[cfg(target_arch = "x86_64")]
            Kernel::Avx512 => unsafe { x86::step_avx512(q, p, dim, out) },
        }
    }
}

fn step_portable(q: &[f32], p: &[f32], dim: usize, out: &mut [[f32; STEP]; QUERY_TILE]) {
    for (a, o) in out.iter_mut().enumerate() {
        let qa = &q[a * dim..(a + 1) * dim];
        *o = [0.0; STEP];
        for (half, acc) in o.chunks_exact_mut(PANEL).enumerate() {
            let panel = &p[half * PANEL * dim..(half + 1) * PANEL * dim];
            for (&x, col) in qa.iter().zip(panel.chunks_exact(PANEL)) {
                for (s, &m) in acc.iter_mut().zip(col) {
                    *s += x * m;
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::{PANEL, QUERY_TILE, STEP};
    use core::arch::x86_64::*;

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn step_avx2(
        q: &[f32],
        p: &[f32],
        dim: usize,
        out: &mut [[f32; STEP]; QUERY_TILE],
    ) {
        const HALF: usize = QUERY_TILE / 2;
        for half in 0..2 {
            let pp = p.as_ptr().add(half * PANEL * dim);
            for qh in 0..2 {
                let qp = q.as_ptr().add(qh * HALF * dim);
                let mut acc = [[_mm256_setzero_ps(); 2]; HALF];
                for j in 0..dim {
                    let lo = _mm256_loadu_ps(pp.add(j * PANEL));
                    let hi = _mm256_loadu_ps(pp.add(j * PANEL + 8));
                    for a in 0..HALF {
                        let x = _mm256_set1_ps(*qp.add(a * dim + j));
                        acc[a][0] = _mm256_fmadd_ps(x, lo, acc[a][0]);
                        acc[a][1] = _mm256_fmadd_ps(x, hi, acc[a][1]);
                    }
                }
                for a in 0..HALF {
                    let o = out[qh * HALF + a].as_mut_ptr().add(half * PANEL);
                    _mm256_storeu_ps(o, acc[a][0]);
                    _mm256_storeu_ps(o.add(8), acc[a][1]);
                }
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn step_avx512(
        q: &[f32],
        p: &[f32],
        dim: usize,
        out: &mut [[f32; STEP]; QUERY_TILE],
    ) {
        let qp = q.as_ptr();
        let p0 = p.as_ptr();
        let p1 = p0.add(PANEL * dim);
        let mut acc = [[_mm512_setzero_ps(); 2]; QUERY_TILE];
        for j in 0..dim {
            let m0 = _mm512_loadu_ps(p0.add(j * PANEL));
            let m1 = _mm512_loadu_ps(p1.add(j * PANEL));
            for a in 0..QUERY_TILE {
                let x = _mm512_set1_ps(*qp.add(a * dim + j));
                acc[a][0] = _mm512_fmadd_ps(x, m0, acc[a][0]);
                acc[a][1] = _mm512_fmadd_ps(x, m1, acc[a][1]);
            }
        }
        for (o, v) in out.iter_mut().zip(acc) {
            _mm512_storeu_ps(o.as_mut_ptr(), v[0]);
            _mm512_storeu_ps(o.as_mut_ptr().add(PANEL), v[1]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};

    fn brute(members: &Matrix<f32>, q: &[f32], k: usize) -> f64 {
        let mut d: Vec<f64> = members
            .iter_rows()
            .map(|m| libm::sqrt(exact_sq_distance(q, m)))
            .collect();
        d.sort_by(f64::total_cmp);
        d[k - 1]
    }

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix<f32> {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn kernels() -> Vec<Kernel> {
        #[allow(unused_mut)]
        let mut v = vec![Kernel::Portable];
        #[cfg(all(target_arch = "x86_64", feature = "std"))]
        {
            if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                v.push(Kernel::Avx2);
            }
            if std::is_x86_feature_detected!("avx512f") {
                v.push(Kernel::Avx512);
            }
        }
        v
    }

    #[test]
    fn kernels_agree_on_dot_products() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for dim in [1usize, 7, 48] {
            let q: Vec<f32> = (0..QUERY_TILE * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p: Vec<f32> = (0..STEP * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            for kernel in kernels() {
                let mut got = [[0.0f32; STEP]; QUERY_TILE];
                kernel.step(&q, &p, dim, &mut got);
                for a in 0..QUERY_TILE {
                    for b in 0..STEP {
                        let (panel, lane) = (b / PANEL, b % PANEL);
                        let exact: f64 = (0..dim)
                            .map(|j| q[a * dim + j] as f64 * p[panel * PANEL * dim + j * PANEL + lane] as f64)
                            .sum();
                        let g = got[a][b] as f64;
                        assert!((g - exact).abs() < 1e-4, "{kernel:?} {g} vs {exact}");
                    }
                }
            }
        }
    }

    #[test]
    fn matches_sorted_distances_unnormalized() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &(m, d) in &[(1usize, 1usize), (5, 3), (37, 17), (300, 40)] {
            let members = random_matrix(&mut rng, m, d);
            let queries = random_matrix(&mut rng, 9, d);
            let knn = ExactKnn::new(&members);
            for k in [1, m.div_ceil(2), m] {
                let got = knn.kth_distances(&queries, k).unwrap();
                for (i, g) in got.iter().enumerate() {
                    assert_eq!(*g, brute(&members, queries.row(i), k));
                }
            }
        }
    }

    #[test]
    fn heavy_ties_are_handled() {
        // Every member equidistant from the query.
        let members = Matrix::from_vec(200, 2, [1.0f32, 0.0].repeat(200)).unwrap();
        let knn = ExactKnn::new(&members);
        for k in [1, 100, 200] {
            assert_eq!(knn.kth_distance(&[0.0, 1.0], k).unwrap(), libm::sqrt(2.0));
        }
    }

    #[test]
    fn invalid_queries() {
        let knn = ExactKnn::new(&Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        assert!(matches!(knn.kth_distance(&[1.0, 0.0], 0), Err(Error::InvalidParameter(_))));
        assert!(matches!(knn.kth_distance(&[1.0, 0.0], 3), Err(Error::InvalidParameter(_))));
        assert!(matches!(knn.kth_distance(&[1.0], 1), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(
            knn.kth_distance(&[f32::NAN, 0.0], 1),
            Err(Error::NonFinite { .. })
        ));
        let empty = ExactKnn::new(&Matrix::from_vec(0, 2, vec![]).unwrap());
        assert_eq!(empty.kth_distance(&[1.0, 0.0], 1), Err(Error::EmptyIndex));
    }

    #[test]
    fn members_round_trip_without_padding() {
        let m = Matrix::from_vec(3, 5, (0..15).map(|v| v as f32).collect()).unwrap();
        assert_eq!(ExactKnn::new(&m).members(), m);
    }
}
