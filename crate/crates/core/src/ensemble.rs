//! Per-sample combination of the zero-shot and fine-tuned models.

use alloc::borrow::Cow;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::outputs::{
    self, apply_temperature, argmax_f64, softmax_into, ModelTag, ProbMatrix, SplitData, Temperature,
};
use crate::weighting::WeightFunction;
use crate::zsf::ZsfIndex;
use crate::{Error, Matrix, Result};

/// Where the two models are interpolated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    /// `w * softmax(ft) + (1 - w) * softmax(zs)`
    #[default]
    Prob,
    /// `softmax(w * ft + (1 - w) * zs)`
    Logit,
}

impl core::str::FromStr for Space {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prob" => Ok(Space::Prob),
            "logit" => Ok(Space::Logit),
            other => Err(Error::InvalidParameter(alloc::format!(
                "unknown space `{other}` (expected prob or logit)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub space: Space,
    pub weight_fn: WeightFunction,
    /// Temperature-scale both models before combining.
    pub use_calibration: bool,
}

impl EnsembleConfig {
    pub fn new(weight_fn: WeightFunction) -> Self {
        EnsembleConfig {
            space: Space::Prob,
            weight_fn,
            use_calibration: false,
        }
    }

    pub fn with_space(self, space: Space) -> Self {
        EnsembleConfig { space, ..self }
    }
}

/// Temperatures for the two models, fitted independently.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub zs: Temperature,
    pub ft: Temperature,
}

impl Calibration {
    /// Fits one temperature per model on a validation split.
    pub fn fit(val: &SplitData) -> Result<Self> {
        Ok(Calibration {
            zs: outputs::fit_temperature(&val.zs.logits, &val.labels)?,
            ft: outputs::fit_temperature(&val.ft.logits, &val.labels)?,
        })
    }
}

/// Which encoder's features are used to query the ZSF index.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryEncoder {
    Zs,
    #[default]
    Ft,
}

impl QueryEncoder {
    pub fn tag(self) -> ModelTag {
        match self {
            QueryEncoder::Zs => ModelTag::Zs,
            QueryEncoder::Ft => ModelTag::Ft,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensembled {
    pub probs: ProbMatrix,
    pub predictions: Vec<u32>,
}

fn check_pair(zs: &Matrix<f32>, ft: &Matrix<f32>, weights: &[f64]) -> Result<()> {
    if zs.rows() != ft.rows() || zs.cols() != ft.cols() {
        return Err(Error::ShapeMismatch {
            what: "ft logits vs zs logits",
            expected: zs.rows() * zs.cols(),
            found: ft.rows() * ft.cols(),
        });
    }
    if weights.len() != zs.rows() {
        return Err(Error::ShapeMismatch {
            what: "weights",
            expected: zs.rows(),
            found: weights.len(),
        });
    }
    if let Some(i) = weights.iter().position(|w| !(0.0..=1.0).contains(w)) {
        return Err(Error::InvalidParameter(alloc::format!(
            "weight {} at row {i} outside [0, 1]",
            weights[i]
        )));
    }
    Ok(())
}

/// Combined probabilities for one row. `zs`/`ft` are probabilities in
/// [`Space::Prob`] and logits in [`Space::Logit`].
fn combine_row(space: Space, w: f64, zs: &[f64], ft: &[f64], out: &mut [f64]) {
    match space {
        Space::Prob => {
            for ((o, &z), &f) in out.iter_mut().zip(zs).zip(ft) {
                *o = w * f + (1.0 - w) * z;
            }
        }
        Space::Logit => {
            let mixed = zs.iter().zip(ft).map(|(&z, &f)| w * f + (1.0 - w) * z);
            softmax_into(mixed, out);
        }
    }
}

fn widen(row: &[f32], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v as f64;
    }
}

/// Combines the two models row by row with per-sample weights on the
/// fine-tuned model.
pub fn ensemble(space: Space, zs_logits: &Matrix<f32>, ft_logits: &Matrix<f32>, weights: &[f64]) -> Result<Ensembled> {
    check_pair(zs_logits, ft_logits, weights)?;
    let (n, k) = (zs_logits.rows(), zs_logits.cols());
    let mut probs = Matrix::filled(n, k, 0.0f64);
    match space {
        Space::Prob => {
            let pz = outputs::softmax(zs_logits)?;
            let pf = outputs::softmax(ft_logits)?;
            for i in 0..n {
                combine_row(space, weights[i], pz.row(i), pf.row(i), probs.row_mut(i));
            }
        }
        Space::Logit => {
            let (mut z, mut f) = (alloc::vec![0.0; k], alloc::vec![0.0; k]);
            for i in 0..n {
                if zs_logits.row(i).iter().chain(ft_logits.row(i)).any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        what: "logits",
                        row: i,
                    });
                }
                widen(zs_logits.row(i), &mut z);
                widen(ft_logits.row(i), &mut f);
                combine_row(space, weights[i], &z, &f, probs.row_mut(i));
            }
        }
    }
    let probs = ProbMatrix::from_matrix(probs);
    let predictions = probs.predict();
    Ok(Ensembled { probs, predictions })
}

/// Output-space ensemble with a constant coefficient on the fine-tuned model.
pub fn ose(alpha: f64, zs_logits: &Matrix<f32>, ft_logits: &Matrix<f32>) -> Result<Ensembled> {
    let w = WeightFunction::constant(alpha)?;
    ensemble(Space::Prob, zs_logits, ft_logits, &alloc::vec![w.weight(0.0)?; zs_logits.rows()])
}

/// Logit-space ensemble with a constant coefficient on the fine-tuned model.
pub fn lse(alpha: f64, zs_logits: &Matrix<f32>, ft_logits: &Matrix<f32>) -> Result<Ensembled> {
    let w = WeightFunction::constant(alpha)?;
    ensemble(Space::Logit, zs_logits, ft_logits, &alloc::vec![w.weight(0.0)?; zs_logits.rows()])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitEvaluation {
    pub distances: Option<Vec<f64>>,
    pub weights: Vec<f64>,
    pub probs: ProbMatrix,
    pub predictions: Vec<u32>,
    pub accuracy: f64,
    pub mean_weight: f64,
}

/// A split with the per-model quantities that do not depend on the weight
/// function computed once: (calibrated) probabilities and ZSF distances.
/// Sweeps evaluate many weight functions against one of these.
#[derive(Debug, Clone)]
pub struct PreparedSplit<'a> {
    labels: &'a [u32],
    zs_logits: Cow<'a, Matrix<f32>>,
    ft_logits: Cow<'a, Matrix<f32>>,
    zs_probs: ProbMatrix,
    ft_probs: ProbMatrix,
    distances: Option<Vec<f64>>,
}

impl<'a> PreparedSplit<'a> {
    /// `index` may be `None` when only constant weights will be evaluated.
    pub fn new(
        split: &'a SplitData,
        index: Option<&ZsfIndex>,
        calibration: Option<&Calibration>,
        encoder: QueryEncoder,
    ) -> Result<Self> {
        let distances = match index {
            Some(index) => Some(index.distances(&split.outputs(encoder.tag()).features)?),
            None => None,
        };
        Self::with_distances(split, distances, calibration)
    }

    /// Like [`PreparedSplit::new`] with distances computed elsewhere (for
    /// instance in parallel). One distance per row.
    pub fn with_distances(
        split: &'a SplitData,
        distances: Option<Vec<f64>>,
        calibration: Option<&Calibration>,
    ) -> Result<Self> {
        if let Some(d) = &distances {
            if d.len() != split.len() {
                return Err(Error::ShapeMismatch {
                    what: "distances",
                    expected: split.len(),
                    found: d.len(),
                });
            }
        }
        let (zs_logits, ft_logits) = match calibration {
            Some(c) => (
                Cow::Owned(apply_temperature(&split.zs.logits, c.zs)),
                Cow::Owned(apply_temperature(&split.ft.logits, c.ft)),
            ),
            None => (Cow::Borrowed(&split.zs.logits), Cow::Borrowed(&split.ft.logits)),
        };
        let zs_probs = outputs::softmax(&zs_logits)?;
        let ft_probs = outputs::softmax(&ft_logits)?;
        Ok(PreparedSplit {
            labels: &split.labels,
            zs_logits,
            ft_logits,
            zs_probs,
            ft_probs,
            distances,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        self.labels
    }

    pub fn distances(&self) -> Option<&[f64]> {
        self.distances.as_deref()
    }

    pub fn weights(&self, weight_fn: &WeightFunction) -> Result<Vec<f64>> {
        match (&self.distances, weight_fn) {
            (_, WeightFunction::Constant { alpha }) => Ok(alloc::vec![*alpha; self.len()]),
            (Some(d), w) => w.weight_batch(d),
            (None, _) => Err(Error::InvalidParameter(
                "distance-based weights need a ZSF index".into(),
            )),
        }
    }

    fn for_each_row(&self, space: Space, weights: &[f64], mut f: impl FnMut(usize, &[f64])) {
        let k = self.zs_probs.matrix().cols();
        let mut out = alloc::vec![0.0; k];
        let (mut z, mut ft) = (alloc::vec![0.0; k], alloc::vec![0.0; k]);
        for (i, &w) in weights.iter().enumerate() {
            match space {
                Space::Prob => {
                    combine_row(space, w, self.zs_probs.row(i), self.ft_probs.row(i), &mut out)
                }
                Space::Logit => {
                    widen(self.zs_logits.row(i), &mut z);
                    widen(self.ft_logits.row(i), &mut ft);
                    combine_row(space, w, &z, &ft, &mut out);
                }
            }
            f(i, &out);
        }
    }

    /// Top-1 accuracy and mean weight, without materializing probabilities.
    pub fn score(&self, weight_fn: &WeightFunction, space: Space) -> Result<(f64, f64)> {
        let weights = self.weights(weight_fn)?;
        let mut hits = 0usize;
        self.for_each_row(space, &weights, |i, p| {
            if argmax_f64(p) == self.labels[i] {
                hits += 1;
            }
        });
        let n = self.len().max(1) as f64;
        Ok((hits as f64 / n, weights.iter().sum::<f64>() / n))
    }

    pub fn evaluate(&self, weight_fn: &WeightFunction, space: Space) -> Result<SplitEvaluation> {
        let weights = self.weights(weight_fn)?;
        let k = self.zs_probs.matrix().cols();
        let mut probs = Matrix::filled(self.len(), k, 0.0f64);
        self.for_each_row(space, &weights, |i, p| probs.row_mut(i).copy_from_slice(p));
        let probs = ProbMatrix::from_matrix(probs);
        let predictions = probs.predict();
        let n = self.len().max(1) as f64;
        Ok(SplitEvaluation {
            distances: self.distances.clone(),
            accuracy: outputs::accuracy(&predictions, self.labels),
            mean_weight: weights.iter().sum::<f64>() / n,
            weights,
            probs,
            predictions,
        })
    }
}

/// Runs distance, weight and combination steps on one split.
pub fn evaluate_split(
    split: &SplitData,
    index: Option<&ZsfIndex>,
    config: &EnsembleConfig,
    calibration: Option<&Calibration>,
    encoder: QueryEncoder,
) -> Result<SplitEvaluation> {
    if config.use_calibration && calibration.is_none() {
        return Err(Error::InvalidParameter(
            "calibration requested but no temperatures given".into(),
        ));
    }
    let calibration = calibration.filter(|_| config.use_calibration);
    let index = index.filter(|_| !config.weight_fn.is_constant());
    if !config.weight_fn.is_constant() {
        match index {
            None => {
                return Err(Error::InvalidParameter(
                    "distance-based weights need a ZSF index".into(),
                ))
            }
            Some(i) if i.is_empty() => return Err(Error::EmptyIndex),
            _ => {}
        }
    }
    PreparedSplit::new(split, index, calibration, encoder)?.evaluate(&config.weight_fn, config.space)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn m(rows: usize, cols: usize, v: &[f32]) -> Matrix<f32> {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn midpoint_example() {
        // softmax([ln 0.8, ln 0.2]) = [0.8, 0.2]
        let ft = m(1, 2, &[0.8f32.ln(), 0.2f32.ln()]);
        let zs = m(1, 2, &[0.2f32.ln(), 0.8f32.ln()]);
        let out = ensemble(Space::Prob, &zs, &ft, &[0.5]).unwrap();
        assert!((out.probs.row(0)[0] - 0.5).abs() < 1e-7);
        assert!((out.probs.row(0)[1] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn endpoints() {
        let zs = m(2, 3, &[1.0, 2.0, 0.0, 0.5, -1.0, 3.0]);
        let ft = m(2, 3, &[3.0, 0.0, 0.0, 2.0, 1.0, 0.0]);
        for space in [Space::Prob, Space::Logit] {
            let one = ensemble(space, &zs, &ft, &[1.0, 1.0]).unwrap();
            let zero = ensemble(space, &zs, &ft, &[0.0, 0.0]).unwrap();
            let pf = outputs::softmax(&ft).unwrap();
            let pz = outputs::softmax(&zs).unwrap();
            for i in 0..2 {
                for j in 0..3 {
                    assert!((one.probs.row(i)[j] - pf.row(i)[j]).abs() < 1e-7);
                    assert!((zero.probs.row(i)[j] - pz.row(i)[j]).abs() < 1e-7);
                }
            }
            assert_eq!(one.predictions, vec![0, 0]);
            assert_eq!(zero.predictions, vec![1, 2]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = m(1, 2, &[0.0, 1.0]);
        let b = m(1, 3, &[0.0, 1.0, 2.0]);
        assert!(ensemble(Space::Prob, &a, &b, &[0.5]).is_err());
        assert!(ensemble(Space::Prob, &a, &a, &[0.5, 0.5]).is_err());
        assert!(ensemble(Space::Prob, &a, &a, &[1.5]).is_err());
        assert!(ensemble(Space::Logit, &a, &a, &[f64::NAN]).is_err());
        assert!(ose(-0.1, &a, &a).is_err());
    }

    #[test]
    fn pipeline_needs_index_for_distance_weights() {
        let f = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let zs = outputs::ModelOutputs::new(f.clone(), f.clone(), ModelTag::Zs).unwrap();
        let ft = outputs::ModelOutputs::new(f.clone(), f, ModelTag::Ft).unwrap();
        let split = SplitData::new(zs, ft, vec![0, 1]).unwrap();
        let cfg = EnsembleConfig::new(WeightFunction::sigmoid(1.5, 0.6).unwrap());
        assert!(evaluate_split(&split, None, &cfg, None, QueryEncoder::Ft).is_err());
        let calibrated = EnsembleConfig {
            use_calibration: true,
            ..EnsembleConfig::new(WeightFunction::constant(0.5).unwrap())
        };
        assert!(evaluate_split(&split, None, &calibrated, None, QueryEncoder::Ft).is_err());
        let constant = EnsembleConfig::new(WeightFunction::constant(0.5).unwrap());
        let eval = evaluate_split(&split, None, &constant, None, QueryEncoder::Ft).unwrap();
        assert_eq!(eval.accuracy, 1.0);
        assert_eq!(eval.mean_weight, 0.5);
        assert!(eval.distances.is_none());
    }
}
