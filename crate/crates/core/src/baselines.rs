//! Selective prediction: an OOD detector routes each sample to the
//! fine-tuned model (scored as in-distribution) or the zero-shot model.
//!
//! Higher scores mean "more in-distribution". Routing uses
//! `score >= lambda  =>  fine-tuned`.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::outputs::{self, log_sum_exp, softmax_into, SplitData};
use crate::zsf::ZsfIndex;
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Msp,
    Energy,
    Md,
    Rmd,
    Knn,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 5] = [
        DetectorKind::Msp,
        DetectorKind::Energy,
        DetectorKind::Md,
        DetectorKind::Rmd,
        DetectorKind::Knn,
    ];
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "msp" => Ok(DetectorKind::Msp),
            "energy" => Ok(DetectorKind::Energy),
            "md" => Ok(DetectorKind::Md),
            "rmd" => Ok(DetectorKind::Rmd),
            "knn" => Ok(DetectorKind::Knn),
            other => Err(Error::InvalidParameter(format!("unknown detector `{other}`"))),
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DetectorKind::Msp => "msp",
            DetectorKind::Energy => "energy",
            DetectorKind::Md => "md",
            DetectorKind::Rmd => "rmd",
            DetectorKind::Knn => "knn",
        })
    }
}

/// One or more Gaussians sharing a covariance, stored in whitened
/// coordinates so that a squared Mahalanobis distance is a squared
/// Euclidean one.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedGaussians {
    /// Class ids of the rows of `means`.
    classes: Vec<u32>,
    means: DMatrix<f64>,
    covariance: DMatrix<f64>,
    /// `L^-1` where `covariance = L L^T`.
    whitening: DMatrix<f64>,
    white_means: DMatrix<f64>,
}

const ROW_CHUNK: usize = 2048;

impl SharedGaussians {
    /// Per-group means with the pooled within-group covariance (denominator
    /// N), regularized by `1e-4 * trace / D` on the diagonal (`1e-4` when the
    /// trace is zero).
    fn fit(features: &Matrix<f32>, groups: &[u32], num_groups: usize) -> Result<Self> {
        let d = features.cols();
        let n = features.rows();
        let mut counts = alloc::vec![0usize; num_groups];
        let mut sums = DMatrix::<f64>::zeros(num_groups, d);
        for (row, &g) in features.iter_rows().zip(groups) {
            counts[g as usize] += 1;
            for (j, &v) in row.iter().enumerate() {
                sums[(g as usize, j)] += v as f64;
            }
        }
        if let Some(g) = counts.iter().position(|&c| c == 1) {
            return Err(Error::Degenerate(format!(
                "class {g} has a single training sample (need >= 2)"
            )));
        }
        let present: Vec<usize> = (0..num_groups).filter(|&g| counts[g] > 0).collect();
        if present.is_empty() {
            return Err(Error::TooFewSamples { needed: 2, found: 0 });
        }
        let mut means = DMatrix::<f64>::zeros(num_groups, d);
        for &g in &present {
            for j in 0..d {
                means[(g, j)] = sums[(g, j)] / counts[g] as f64;
            }
        }

        let mut covariance = DMatrix::<f64>::zeros(d, d);
        let mut start = 0;
        while start < n {
            let rows = (n - start).min(ROW_CHUNK);
            let chunk = DMatrix::from_fn(rows, d, |i, j| {
                features.row(start + i)[j] as f64 - means[(groups[start + i] as usize, j)]
            });
            covariance += chunk.transpose() * &chunk;
            start += rows;
        }
        covariance /= n as f64;
        let trace = covariance.trace();
        let eps = if trace > 0.0 { 1e-4 * trace / d as f64 } else { 1e-4 };
        for j in 0..d {
            covariance[(j, j)] += eps;
        }
        let chol = covariance.clone().cholesky().ok_or_else(|| {
            Error::Degenerate("covariance not positive definite after regularization".into())
        })?;
        let whitening = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or_else(|| Error::Degenerate("singular Cholesky factor".into()))?;

        let classes: Vec<u32> = present.iter().map(|&g| g as u32).collect();
        let means = means.select_rows(present.iter());
        let white_means = &means * whitening.transpose();
        Ok(SharedGaussians {
            classes,
            means,
            covariance,
            whitening,
            white_means,
        })
    }

    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    /// The regularized shared covariance.
    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    fn whiten(&self, x: &[f32]) -> Vec<f64> {
        let d = x.len();
        (0..d)
            .map(|i| (0..=i).map(|j| self.whitening[(i, j)] * x[j] as f64).sum())
            .collect()
    }

    /// Squared Mahalanobis distance to every group, in `classes` order.
    pub fn sq_distances(&self, x: &[f32]) -> Vec<f64> {
        let z = self.whiten(x);
        (0..self.white_means.nrows())
            .map(|c| {
                z.iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let diff = v - self.white_means[(c, j)];
                        diff * diff
                    })
                    .sum()
            })
            .collect()
    }
}

/// A fitted score function S(x).
#[derive(Debug, Clone, PartialEq)]
pub enum OodScorer {
    /// Maximum softmax probability of the fine-tuned model.
    Msp,
    /// `logsumexp` of the fine-tuned logits.
    Energy,
    /// Negative minimum class-conditional squared Mahalanobis distance.
    Mahalanobis(SharedGaussians),
    /// Negative minimum of (class distance - background distance).
    RelativeMahalanobis {
        classes: SharedGaussians,
        background: SharedGaussians,
    },
    /// Negative distance to the k-th nearest indexed feature.
    Knn(ZsfIndex),
}

impl OodScorer {
    /// Fits on the ID training split (fine-tuned features and labels).
    /// `p_percent` sets `k` for the kNN detector.
    pub fn fit(kind: DetectorKind, train: &SplitData, p_percent: f64) -> Result<Self> {
        let features = &train.ft.features;
        Ok(match kind {
            DetectorKind::Msp => OodScorer::Msp,
            DetectorKind::Energy => OodScorer::Energy,
            DetectorKind::Md => OodScorer::Mahalanobis(SharedGaussians::fit(
                features,
                &train.labels,
                train.num_classes(),
            )?),
            DetectorKind::Rmd => OodScorer::RelativeMahalanobis {
                classes: SharedGaussians::fit(features, &train.labels, train.num_classes())?,
                background: SharedGaussians::fit(features, &alloc::vec![0; train.len()], 1)?,
            },
            DetectorKind::Knn => {
                if train.is_empty() {
                    return Err(Error::TooFewSamples { needed: 1, found: 0 });
                }
                let all = (0..train.len() as u32).collect();
                OodScorer::Knn(ZsfIndex::from_members(features, all, p_percent)?)
            }
        })
    }

    pub fn kind(&self) -> DetectorKind {
        match self {
            OodScorer::Msp => DetectorKind::Msp,
            OodScorer::Energy => DetectorKind::Energy,
            OodScorer::Mahalanobis(_) => DetectorKind::Md,
            OodScorer::RelativeMahalanobis { .. } => DetectorKind::Rmd,
            OodScorer::Knn(_) => DetectorKind::Knn,
        }
    }

    /// Score of one sample from its fine-tuned features and logits.
    pub fn score(&self, ft_features: &[f32], ft_logits: &[f32]) -> Result<f64> {
        if ft_logits.iter().chain(ft_features).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "sample",
                row: 0,
            });
        }
        let logits = ft_logits.iter().map(|&v| v as f64);
        Ok(match self {
            OodScorer::Msp => {
                let mut p = alloc::vec![0.0; ft_logits.len()];
                softmax_into(logits, &mut p);
                p.into_iter().fold(0.0, f64::max)
            }
            OodScorer::Energy => log_sum_exp(logits),
            OodScorer::Mahalanobis(g) => {
                self.check_dim(g, ft_features)?;
                -g.sq_distances(ft_features).into_iter().fold(f64::INFINITY, f64::min)
            }
            OodScorer::RelativeMahalanobis {
                classes,
                background,
            } => {
                self.check_dim(classes, ft_features)?;
                let bg = background.sq_distances(ft_features)[0];
                -classes
                    .sq_distances(ft_features)
                    .into_iter()
                    .map(|d| d - bg)
                    .fold(f64::INFINITY, f64::min)
            }
            OodScorer::Knn(index) => -index.distance(ft_features)?,
        })
    }

    fn check_dim(&self, g: &SharedGaussians, x: &[f32]) -> Result<()> {
        if g.means.ncols() == x.len() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                what: "feature dimension",
                expected: g.means.ncols(),
                found: x.len(),
            })
        }
    }

    /// Scores for every row of a split.
    pub fn score_split(&self, split: &SplitData) -> Result<Vec<f64>> {
        if let OodScorer::Knn(index) = self {
            return Ok(index
                .distances(&split.ft.features)?
                .into_iter()
                .map(|d| -d)
                .collect());
        }
        (0..split.len())
            .map(|i| {
                self.score(split.ft.features.row(i), split.ft.logits.row(i))
                    .map_err(|e| match e {
                        Error::NonFinite { what, .. } => Error::NonFinite { what, row: i },
                        e => e,
                    })
            })
            .collect()
    }
}

/// Minimum number of ID validation scores for threshold calibration.
pub const MIN_CALIBRATION_SAMPLES: usize = 20;

/// Largest `lambda` such that at least a `tpr` fraction of the ID scores
/// satisfy `score >= lambda`.
pub fn calibrate_threshold(id_scores: &[f64], tpr: f64) -> Result<f64> {
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::InvalidParameter(format!("tpr must be in (0, 1], got {tpr}")));
    }
    if id_scores.len() < MIN_CALIBRATION_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_CALIBRATION_SAMPLES,
            found: id_scores.len(),
        });
    }
    if let Some(row) = id_scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite { what: "score", row });
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len();
    let keep = (libm::ceil(tpr * n as f64 - 1e-9) as usize).clamp(1, n);
    Ok(sorted[n - keep])
}

/// Fraction of scores routed to the fine-tuned model.
pub fn true_positive_rate(scores: &[f64], lambda: f64) -> f64 {
    scores.iter().filter(|&&s| s >= lambda).count() as f64 / scores.len().max(1) as f64
}

/// A scorer plus its threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveClassifier {
    pub scorer: OodScorer,
    pub lambda: f64,
}

impl SelectiveClassifier {
    pub fn calibrate(scorer: OodScorer, id_val: &SplitData, tpr: f64) -> Result<Self> {
        let lambda = calibrate_threshold(&scorer.score_split(id_val)?, tpr)?;
        Ok(SelectiveClassifier { scorer, lambda })
    }

    pub fn predict(&self, split: &SplitData) -> Result<Vec<u32>> {
        let scores = self.scorer.score_split(split)?;
        selective_predict(
            &scores,
            self.lambda,
            &outputs::predict(&split.zs.logits)?,
            &outputs::predict(&split.ft.logits)?,
        )
    }
}

/// Hard switch: fine-tuned prediction where `score >= lambda`, zero-shot
/// prediction elsewhere. `lambda = -inf` routes everything to the
/// fine-tuned model, `+inf` everything to the zero-shot model.
pub fn selective_predict(scores: &[f64], lambda: f64, zs_pred: &[u32], ft_pred: &[u32]) -> Result<Vec<u32>> {
    if lambda.is_nan() {
        return Err(Error::InvalidParameter("lambda is NaN".into()));
    }
    if zs_pred.len() != scores.len() || ft_pred.len() != scores.len() {
        return Err(Error::ShapeMismatch {
            what: "predictions vs scores",
            expected: scores.len(),
            found: zs_pred.len().min(ft_pred.len()),
        });
    }
    Ok(scores
        .iter()
        .zip(zs_pred.iter().zip(ft_pred))
        .map(|(&s, (&z, &f))| {
            if lambda == f64::NEG_INFINITY || (lambda != f64::INFINITY && s >= lambda) {
                f
            } else {
                z
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::outputs::{ModelOutputs, ModelTag};
    use alloc::string::ToString;
    use alloc::vec;

    fn split(features: Matrix<f32>, logits: Matrix<f32>, labels: Vec<u32>) -> SplitData {
        let zs = ModelOutputs::new(features.clone(), logits.clone(), ModelTag::Zs).unwrap();
        let ft = ModelOutputs::new(features, logits, ModelTag::Ft).unwrap();
        SplitData::new(zs, ft, labels).unwrap()
    }

    #[test]
    fn msp_and_energy_examples() {
        assert!((OodScorer::Msp.score(&[1.0], &[0.0; 10]).unwrap() - 0.1).abs() < 1e-15);
        let e = OodScorer::Energy.score(&[1.0], &[0.0, 0.0]).unwrap();
        assert!((e - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn unit_mahalanobis() {
        let g = SharedGaussians {
            classes: vec![0],
            means: DMatrix::zeros(1, 2),
            covariance: DMatrix::identity(2, 2),
            whitening: DMatrix::identity(2, 2),
            white_means: DMatrix::zeros(1, 2),
        };
        let s = OodScorer::Mahalanobis(g).score(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(s, -1.0);
    }

    #[test]
    fn identical_points_regularize_to_eps_identity() {
        let feats = Matrix::from_vec(4, 2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let logits = Matrix::filled(4, 2, 0.0f32);
        let train = split(feats, logits, vec![0, 0, 1, 1]);
        let OodScorer::Mahalanobis(g) = OodScorer::fit(DetectorKind::Md, &train, 0.1).unwrap() else {
            panic!("wrong kind")
        };
        assert_eq!(g.means()[(0, 0)], 1.0);
        assert_eq!(g.means()[(0, 1)], 0.0);
        assert_eq!(g.means()[(1, 1)], 1.0);
        assert_eq!(*g.covariance(), DMatrix::identity(2, 2) * 1e-4);
    }

    #[test]
    fn single_sample_class_is_rejected() {
        let feats = Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let train = split(feats, Matrix::filled(3, 2, 0.0f32), vec![0, 0, 1]);
        assert!(OodScorer::fit(DetectorKind::Md, &train, 0.1).is_err());
        assert!(OodScorer::fit(DetectorKind::Rmd, &train, 0.1).is_err());
        assert!(OodScorer::fit(DetectorKind::Msp, &train, 0.1).is_ok());
    }

    #[test]
    fn threshold_on_one_to_hundred() {
        let scores: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let lambda = calibrate_threshold(&scores, 0.95).unwrap();
        assert_eq!(lambda, 6.0);
        assert_eq!(true_positive_rate(&scores, lambda), 0.95);
        assert_eq!(calibrate_threshold(&[3.5; 20], 0.95).unwrap(), 3.5);
        assert!(calibrate_threshold(&[1.0; 19], 0.95).is_err());
        assert!(calibrate_threshold(&scores, 0.0).is_err());
    }

    #[test]
    fn infinite_thresholds_override() {
        let scores = [f64::NEG_INFINITY, 0.0, f64::INFINITY];
        let zs = [0, 0, 0];
        let ft = [1, 1, 1];
        assert_eq!(selective_predict(&scores, f64::NEG_INFINITY, &zs, &ft).unwrap(), ft);
        assert_eq!(selective_predict(&scores, f64::INFINITY, &zs, &ft).unwrap(), zs);
        assert_eq!(selective_predict(&scores, 0.0, &zs, &ft).unwrap(), vec![0, 1, 1]);
        assert!(selective_predict(&scores, f64::NAN, &zs, &ft).is_err());
    }

    #[test]
    fn detector_names_round_trip() {
        for kind in DetectorKind::ALL {
            assert_eq!(kind.to_string().parse::<DetectorKind>().unwrap(), kind);
        }
        assert!("odin".parse::<DetectorKind>().is_err());
    }
}
