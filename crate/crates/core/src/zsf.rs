//! The zero-shot failure (ZSF) index.
//!
//! Members are the fine-tuned features of training rows where the fine-tuned
//! prediction matches the label and the zero-shot prediction does not.
//! Queries return the distance to the k-th nearest member.

use alloc::format;
use alloc::vec::Vec;

use crate::knn::ExactKnn;
use crate::outputs::{self, check_labels};
use crate::{Error, Matrix, Result};

/// `k = max(1, floor(p_percent / 100 * m))`, capped at `m`.
pub fn k_from_percent(p_percent: f64, m: usize) -> usize {
    // The epsilon absorbs representation error, e.g. 0.1 * 1000 / 100.
    let raw = libm::floor(p_percent * m as f64 / 100.0 + 1e-9) as usize;
    raw.max(1).min(m)
}

fn check_percent(p_percent: f64) -> Result<()> {
    if p_percent > 0.0 && p_percent <= 100.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "p_percent must be in (0, 100], got {p_percent}"
        )))
    }
}

/// Rows where `ft_pred == label && zs_pred != label`.
pub fn zsf_rows(labels: &[u32], zs_pred: &[u32], ft_pred: &[u32]) -> Vec<usize> {
    labels
        .iter()
        .zip(zs_pred.iter().zip(ft_pred))
        .enumerate()
        .filter(|(_, (y, (z, f)))| f == y && z != y)
        .map(|(i, _)| i)
        .collect()
}

/// Immutable set of unit-norm member features with its neighbor rank `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZsfIndex {
    knn: ExactKnn,
    source_indices: Vec<u32>,
    k: usize,
    p_percent: f64,
}

impl ZsfIndex {
    /// Builds the index from training labels, both models' logits and the
    /// fine-tuned features. An empty member set is allowed; queries on it fail
    /// with [`Error::EmptyIndex`].
    pub fn build(
        labels: &[u32],
        zs_logits: &Matrix<f32>,
        ft_logits: &Matrix<f32>,
        ft_features: &Matrix<f32>,
        p_percent: f64,
    ) -> Result<Self> {
        check_percent(p_percent)?;
        let n = labels.len();
        for (what, found) in [
            ("zs logit rows", zs_logits.rows()),
            ("ft logit rows", ft_logits.rows()),
            ("ft feature rows", ft_features.rows()),
        ] {
            if found != n {
                return Err(Error::ShapeMismatch {
                    what,
                    expected: n,
                    found,
                });
            }
        }
        if zs_logits.cols() != ft_logits.cols() {
            return Err(Error::ShapeMismatch {
                what: "ft logit classes",
                expected: zs_logits.cols(),
                found: ft_logits.cols(),
            });
        }
        check_labels(labels, zs_logits.cols())?;
        let zs_pred = outputs::predict(zs_logits)?;
        let ft_pred = outputs::predict(ft_logits)?;
        let rows = zsf_rows(labels, &zs_pred, &ft_pred);
        let members = ft_features.select_rows(&rows);
        let source = rows.into_iter().map(|i| i as u32).collect();
        Self::from_members(&members, source, p_percent)
    }

    /// Index over arbitrary member rows (normalized here), with `k` from the
    /// percentage rule.
    pub fn from_members(members: &Matrix<f32>, source_indices: Vec<u32>, p_percent: f64) -> Result<Self> {
        check_percent(p_percent)?;
        let k = k_from_percent(p_percent, members.rows());
        Self::from_parts(&outputs::normalize_features(members)?, source_indices, k, p_percent)
    }

    /// Reassembles a saved index. Members must already be unit norm and `k`
    /// must follow the percentage rule.
    pub fn from_parts(members: &Matrix<f32>, source_indices: Vec<u32>, k: usize, p_percent: f64) -> Result<Self> {
        check_percent(p_percent)?;
        if source_indices.len() != members.rows() {
            return Err(Error::ShapeMismatch {
                what: "source indices",
                expected: members.rows(),
                found: source_indices.len(),
            });
        }
        if members.cols() == 0 {
            return Err(Error::InvalidParameter("feature dimension must be >= 1".into()));
        }
        if members.rows() > u32::MAX as usize {
            return Err(Error::InvalidParameter("more than 2^32 members".into()));
        }
        for (i, row) in members.iter_rows().enumerate() {
            let norm = outputs::l2_norm(row);
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidParameter(format!(
                    "member {i} has norm {norm}, expected 1"
                )));
            }
        }
        let expected_k = k_from_percent(p_percent, members.rows());
        if k != expected_k {
            return Err(Error::InvalidParameter(format!(
                "k = {k} inconsistent with p = {p_percent}% of {} members (expected {expected_k})",
                members.rows()
            )));
        }
        Ok(ZsfIndex {
            knn: ExactKnn::new(members),
            source_indices,
            k,
            p_percent,
        })
    }

    /// Same members, `k` recomputed for another percentage.
    pub fn with_percent(&self, p_percent: f64) -> Result<Self> {
        check_percent(p_percent)?;
        Ok(ZsfIndex {
            k: k_from_percent(p_percent, self.len()),
            p_percent,
            ..self.clone()
        })
    }

    pub fn len(&self) -> usize {
        self.knn.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knn.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.knn.dim()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p_percent(&self) -> f64 {
        self.p_percent
    }

    pub fn source_indices(&self) -> &[u32] {
        &self.source_indices
    }

    pub fn members(&self) -> Matrix<f32> {
        self.knn.members()
    }

    pub fn engine(&self) -> &ExactKnn {
        &self.knn
    }

    /// Distance from `query` (normalized first) to its k-th nearest member.
    /// Lies in `[0, 2]`.
    pub fn distance(&self, query: &[f32]) -> Result<f64> {
        let q = Matrix::from_vec(1, query.len(), query.to_vec())?;
        Ok(self.distances(&q)?[0])
    }

    pub fn distances(&self, queries: &Matrix<f32>) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let q = outputs::normalize_features(queries)?;
        self.knn.kth_distances(&q, self.k)
    }
}
