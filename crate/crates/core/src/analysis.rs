//! Accuracy-ratio curves, residual statistics, optimal combination weights
//! and ID/OOD frontiers.
//!
//! With residuals `eta_zs`, `eta_ft` and a weight `g` on the fine-tuned model,
//! the combined residual has variance
//!
//! ```text
//! V(g) = (1 - g)^2 V_zs + g^2 V_ft + 2 g (1 - g) C
//! ```
//!
//! minimized at `g = V_zs / (V_zs + V_ft)` when `C = 0` and at
//! `g = (1 + (V_ft - C) / (V_zs - C))^-1` in general.

use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::ensemble::{EnsembleConfig, PreparedSplit, Space};
use crate::outputs::{check_labels, ProbMatrix};
use crate::weighting::{sweep_grid, GridSpec, WeightFunction, WeightKind};
use crate::{Error, Result};

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            what,
            expected,
            found,
        })
    }
}

/// Centers 0.2, 0.4, ..., 1.8.
pub fn default_bin_centers() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 5.0).collect()
}

pub const DEFAULT_HALFWIDTH: f64 = 0.1;

fn in_bin(d: f64, center: f64, halfwidth: f64) -> bool {
    // Tolerance so that bin edges like 0.7 = 0.8 - 0.1 stay inclusive.
    (d - center).abs() <= halfwidth + 1e-12
}

fn check_bins(halfwidth: f64) -> Result<()> {
    if halfwidth > 0.0 && halfwidth.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(alloc::format!(
            "bin halfwidth must be > 0, got {halfwidth}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioCurve {
    pub bin_centers: Vec<f64>,
    pub bin_halfwidth: f64,
    /// `Acc_ft / Acc_zs`; `None` for empty bins and bins where the zero-shot
    /// accuracy is 0.
    pub ratio: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    pub zs_accuracy: Vec<Option<f64>>,
    pub ft_accuracy: Vec<Option<f64>>,
}

impl RatioCurve {
    /// `(center, ratio)` for bins with a defined ratio.
    pub fn defined(&self) -> Vec<(f64, f64)> {
        self.bin_centers
            .iter()
            .zip(&self.ratio)
            .filter_map(|(&c, r)| r.map(|r| (c, r)))
            .collect()
    }
}

/// Fine-tuned over zero-shot accuracy among samples with
/// `|d - center| <= halfwidth`, per bin. Bins may overlap.
pub fn ratio_curve(
    distances: &[f64],
    zs_preds: &[u32],
    ft_preds: &[u32],
    labels: &[u32],
    bin_centers: &[f64],
    halfwidth: f64,
) -> Result<RatioCurve> {
    check_bins(halfwidth)?;
    let n = labels.len();
    check_len("distances", n, distances.len())?;
    check_len("zs predictions", n, zs_preds.len())?;
    check_len("ft predictions", n, ft_preds.len())?;

    let mut curve = RatioCurve {
        bin_centers: bin_centers.to_vec(),
        bin_halfwidth: halfwidth,
        ratio: Vec::with_capacity(bin_centers.len()),
        counts: Vec::with_capacity(bin_centers.len()),
        zs_accuracy: Vec::with_capacity(bin_centers.len()),
        ft_accuracy: Vec::with_capacity(bin_centers.len()),
    };
    for &center in bin_centers {
        let (mut count, mut zs_hits, mut ft_hits) = (0usize, 0usize, 0usize);
        for i in 0..n {
            if in_bin(distances[i], center, halfwidth) {
                count += 1;
                zs_hits += (zs_preds[i] == labels[i]) as usize;
                ft_hits += (ft_preds[i] == labels[i]) as usize;
            }
        }
        let (zs_acc, ft_acc) = if count == 0 {
            (None, None)
        } else {
            (
                Some(zs_hits as f64 / count as f64),
                Some(ft_hits as f64 / count as f64),
            )
        };
        curve.ratio.push(match (zs_acc, ft_acc) {
            (Some(z), Some(f)) if z > 0.0 => Some(f / z),
            _ => None,
        });
        curve.counts.push(count);
        curve.zs_accuracy.push(zs_acc);
        curve.ft_accuracy.push(ft_acc);
    }
    Ok(curve)
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side has zero rank variance or fewer than two points.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    pearson_of(&rx, &ry)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = alloc::vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson_of(x: &[f64], y: &[f64]) -> Option<f64> {
    let m = moments(x, y);
    if m.var_x > 0.0 && m.var_y > 0.0 {
        Some((m.cov / libm::sqrt(m.var_x * m.var_y)).clamp(-1.0, 1.0))
    } else {
        None
    }
}

struct Moments {
    var_x: f64,
    var_y: f64,
    cov: f64,
}

/// Population (denominator N) second moments, two-pass.
fn moments(x: &[f64], y: &[f64]) -> Moments {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut c) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        c += (a - mx) * (b - my);
    }
    Moments {
        var_x: vx / n,
        var_y: vy / n,
        cov: c / n,
    }
}

/// True-class residual `P_hat(y | x) - 1` per row (one-hot truth).
pub fn residuals(probs: &ProbMatrix, labels: &[u32]) -> Result<Vec<f64>> {
    check_len("labels", probs.len(), labels.len())?;
    check_labels(labels, probs.matrix().cols())?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| probs.row(i)[y as usize] - 1.0)
        .collect())
}

/// Variance of `(1 - g) eta_zs + g eta_ft`.
pub fn combined_variance(g_ft: f64, var_zs: f64, var_ft: f64, cov: f64) -> f64 {
    let g_zs = 1.0 - g_ft;
    g_zs * g_zs * var_zs + g_ft * g_ft * var_ft + 2.0 * g_zs * g_ft * cov
}

/// `V_zs / (V_zs + V_ft)`; `None` when both variances are zero.
pub fn optimal_weight_independent(var_zs: f64, var_ft: f64) -> Option<f64> {
    let denom = var_zs + var_ft;
    (denom > 0.0).then(|| var_zs / denom)
}

/// `(1 + (V_ft - C) / (V_zs - C))^-1`, clamped to `[0, 1]` (the constrained
/// minimizer when the unconstrained one falls outside). Lies in `(0, 1)`
/// without clamping whenever `C < min(V_zs, V_ft)`. `None` when
/// `V_zs = C` or the quadratic is flat.
pub fn optimal_weight_correlated(var_zs: f64, var_ft: f64, cov: f64) -> Option<f64> {
    let a = var_zs - cov;
    let curvature = var_zs + var_ft - 2.0 * cov;
    if a == 0.0 || curvature <= 0.0 {
        return None;
    }
    let g = 1.0 / (1.0 + (var_ft - cov) / a);
    g.is_finite().then(|| g.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub n: usize,
    pub var_zs: f64,
    pub var_ft: f64,
    pub cov: f64,
    pub g_opt_independent: Option<f64>,
    pub g_opt_correlated: Option<f64>,
    pub pearson: Option<f64>,
}

impl ResidualStats {
    /// Predicted combined variance at weight `g_ft`.
    pub fn combined_variance(&self, g_ft: f64) -> f64 {
        combined_variance(g_ft, self.var_zs, self.var_ft, self.cov)
    }
}

pub fn residual_stats(eta_zs: &[f64], eta_ft: &[f64]) -> Result<ResidualStats> {
    check_len("ft residuals", eta_zs.len(), eta_ft.len())?;
    if eta_zs.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            found: eta_zs.len(),
        });
    }
    if let Some(row) = eta_zs.iter().chain(eta_ft).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "residuals",
            row: row % eta_zs.len(),
        });
    }
    let m = moments(eta_zs, eta_ft);
    let pearson = (m.var_x > 0.0 && m.var_y > 0.0)
        .then(|| (m.cov / libm::sqrt(m.var_x * m.var_y)).clamp(-1.0, 1.0));
    Ok(ResidualStats {
        n: eta_zs.len(),
        var_zs: m.var_x,
        var_ft: m.var_y,
        cov: m.cov,
        g_opt_independent: optimal_weight_independent(m.var_x, m.var_y),
        g_opt_correlated: optimal_weight_correlated(m.var_x, m.var_y, m.cov),
        pearson,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightBin {
    pub center: f64,
    pub count: usize,
    /// `None` for bins with fewer than two samples.
    pub stats: Option<ResidualStats>,
}

impl WeightBin {
    pub fn g_opt(&self) -> Option<f64> {
        self.stats.and_then(|s| s.g_opt_correlated)
    }
}

/// Residual statistics (and so the covariance-aware optimal weight) per
/// distance bin.
pub fn binned_optimal_weight(
    distances: &[f64],
    eta_zs: &[f64],
    eta_ft: &[f64],
    bin_centers: &[f64],
    halfwidth: f64,
) -> Result<Vec<WeightBin>> {
    check_bins(halfwidth)?;
    check_len("zs residuals", distances.len(), eta_zs.len())?;
    check_len("ft residuals", distances.len(), eta_ft.len())?;
    bin_centers
        .iter()
        .map(|&center| {
            let (mut z, mut f) = (Vec::new(), Vec::new());
            for i in 0..distances.len() {
                if in_bin(distances[i], center, halfwidth) {
                    z.push(eta_zs[i]);
                    f.push(eta_ft[i]);
                }
            }
            let stats = if z.len() >= 2 {
                Some(residual_stats(&z, &f)?)
            } else {
                None
            };
            Ok(WeightBin {
                center,
                count: z.len(),
                stats,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrontierMethod {
    /// Constant coefficient, probability space.
    Ose,
    /// Constant coefficient, logit space.
    Lse,
    /// Distance-based sigmoid weights, probability space.
    Vrf,
}

impl core::str::FromStr for FrontierMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ose" => Ok(FrontierMethod::Ose),
            "lse" => Ok(FrontierMethod::Lse),
            "vrf" | "vrf-grid" => Ok(FrontierMethod::Vrf),
            other => Err(Error::InvalidParameter(alloc::format!(
                "unknown frontier method `{other}`"
            ))),
        }
    }
}

impl FrontierMethod {
    pub fn configs(self, grid: &GridSpec) -> Result<Vec<EnsembleConfig>> {
        let (kind, space) = match self {
            FrontierMethod::Ose => (WeightKind::Constant, Space::Prob),
            FrontierMethod::Lse => (WeightKind::Constant, Space::Logit),
            FrontierMethod::Vrf => (WeightKind::Sigmoid, Space::Prob),
        };
        Ok(sweep_grid(kind, grid)?
            .into_iter()
            .map(|w| EnsembleConfig::new(w).with_space(space))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub config: EnsembleConfig,
    pub id_accuracy: f64,
    pub ood_accuracies: Vec<f64>,
    /// Unweighted mean over the OOD splits.
    pub ood_mean: f64,
    pub id_mean_weight: f64,
}

/// One (ID accuracy, mean OOD accuracy) point per config.
pub fn frontier(id: &PreparedSplit<'_>, oods: &[PreparedSplit<'_>], configs: &[EnsembleConfig]) -> Result<Vec<FrontierPoint>> {
    if oods.is_empty() {
        return Err(Error::InvalidParameter("frontier needs at least one OOD split".into()));
    }
    configs
        .iter()
        .map(|c| {
            let (id_accuracy, id_mean_weight) = id.score(&c.weight_fn, c.space)?;
            let ood_accuracies = oods
                .iter()
                .map(|s| s.score(&c.weight_fn, c.space).map(|(acc, _)| acc))
                .collect::<Result<Vec<_>>>()?;
            let ood_mean = ood_accuracies.iter().sum::<f64>() / ood_accuracies.len() as f64;
            Ok(FrontierPoint {
                config: *c,
                id_accuracy,
                ood_accuracies,
                ood_mean,
                id_mean_weight,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub config: EnsembleConfig,
    pub accuracy: f64,
}

fn tie_order(a: &Candidate, b: &Candidate) -> Ordering {
    let key = |c: &Candidate| {
        let w = &c.config.weight_fn;
        (w.b(), w.a(), w.alpha())
    };
    let (ka, kb) = (key(a), key(b));
    let cmp = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (x, y) => x.is_some().cmp(&y.is_some()),
    };
    cmp(ka.0, kb.0)
        .then_with(|| cmp(ka.1, kb.1))
        .then_with(|| cmp(ka.2, kb.2))
}

/// Highest validation accuracy; ties go to smaller `b`, then smaller `a`,
/// then smaller `alpha`, then the earlier candidate.
pub fn select_hyperparams(candidates: &[Candidate]) -> Option<&Candidate> {
    candidates.iter().reduce(|best, c| {
        match c
            .accuracy
            .total_cmp(&best.accuracy)
            .then_with(|| tie_order(best, c))
        {
            Ordering::Greater => c,
            _ => best,
        }
    })
}

/// Scores every weight function on a validation split.
pub fn sweep(val: &PreparedSplit<'_>, weights: &[WeightFunction], space: Space) -> Result<Vec<Candidate>> {
    weights
        .iter()
        .map(|w| {
            let config = EnsembleConfig::new(*w).with_space(space);
            Ok(Candidate {
                config,
                accuracy: val.score(w, space)?.0,
            })
        })
        .collect()
}
