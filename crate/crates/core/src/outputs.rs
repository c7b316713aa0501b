//! Aligned model outputs and the elementary prediction operations.
//!
//! Storage is `f32` (what the tensor files carry); every reduction runs in
//! `f64`.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelTag {
    Zs,
    Ft,
}

/// Features and logits of one model on one split, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    pub features: Matrix<f32>,
    pub logits: Matrix<f32>,
    pub tag: ModelTag,
}

impl ModelOutputs {
    pub fn new(features: Matrix<f32>, logits: Matrix<f32>, tag: ModelTag) -> Result<Self> {
        if features.rows() != logits.rows() {
            return Err(Error::ShapeMismatch {
                what: "logit rows vs feature rows",
                expected: features.rows(),
                found: logits.rows(),
            });
        }
        if features.cols() < 1 {
            return Err(Error::InvalidParameter("feature dimension must be >= 1".into()));
        }
        if logits.cols() < 2 {
            return Err(Error::InvalidParameter("need at least 2 classes".into()));
        }
        Ok(ModelOutputs {
            features,
            logits,
            tag,
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.logits.cols()
    }
}

/// What a split is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitRole {
    /// Builds the ZSF index and fits detectors.
    IdTrain,
    /// Hyperparameter selection, temperature fitting, threshold calibration.
    IdVal,
    IdTest,
    OodTest,
}

impl SplitRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitRole::IdTrain => "id-train",
            SplitRole::IdVal => "id-val",
            SplitRole::IdTest => "id-test",
            SplitRole::OodTest => "ood-test",
        }
    }

    pub fn is_test(self) -> bool {
        matches!(self, SplitRole::IdTest | SplitRole::OodTest)
    }
}

/// Everything the pipeline needs about one split: both models' outputs and
/// the labels, all sharing the leading dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub zs: ModelOutputs,
    pub ft: ModelOutputs,
    pub labels: Vec<u32>,
}

impl SplitData {
    pub fn new(zs: ModelOutputs, ft: ModelOutputs, labels: Vec<u32>) -> Result<Self> {
        let n = zs.len();
        for (what, found) in [("ft rows", ft.len()), ("label count", labels.len())] {
            if found != n {
                return Err(Error::ShapeMismatch {
                    what,
                    expected: n,
                    found,
                });
            }
        }
        if zs.num_classes() != ft.num_classes() {
            return Err(Error::ShapeMismatch {
                what: "ft classes",
                expected: zs.num_classes(),
                found: ft.num_classes(),
            });
        }
        check_labels(&labels, zs.num_classes())?;
        Ok(SplitData { zs, ft, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.zs.num_classes()
    }

    pub fn outputs(&self, tag: ModelTag) -> &ModelOutputs {
        match tag {
            ModelTag::Zs => &self.zs,
            ModelTag::Ft => &self.ft,
        }
    }
}

pub(crate) fn check_labels(labels: &[u32], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l as usize >= num_classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, num_classes }),
        None => Ok(()),
    }
}

/// Row-stochastic matrix of class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix(Matrix<f64>);

impl ProbMatrix {
    pub(crate) fn from_matrix(m: Matrix<f64>) -> Self {
        ProbMatrix(m)
    }

    pub fn matrix(&self) -> &Matrix<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    /// Argmax per row, ties to the smallest index.
    pub fn predict(&self) -> Vec<u32> {
        self.0.iter_rows().map(argmax_f64).collect()
    }
}

pub(crate) fn argmax_f64(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Writes softmax(row) into `out`. `row` must be finite.
pub(crate) fn softmax_into(row: impl Iterator<Item = f64> + Clone, out: &mut [f64]) {
    let max = row.clone().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, z) in out.iter_mut().zip(row) {
        *o = libm::exp(z - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn log_sum_exp(row: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = row.clone().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.map(|z| libm::exp(z - max)).sum();
    max + libm::log(sum)
}

fn check_finite(logits: &Matrix<f32>, what: &'static str) -> Result<()> {
    for (row, r) in logits.iter_rows().enumerate() {
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what, row });
        }
    }
    Ok(())
}

pub fn softmax(logits: &Matrix<f32>) -> Result<ProbMatrix> {
    check_finite(logits, "logits")?;
    let mut out = Matrix::filled(logits.rows(), logits.cols(), 0.0f64);
    for i in 0..logits.rows() {
        softmax_into(logits.row(i).iter().map(|&v| v as f64), out.row_mut(i));
    }
    Ok(ProbMatrix(out))
}

/// Index of the largest logit per row; ties go to the smallest index.
pub fn predict(logits: &Matrix<f32>) -> Result<Vec<u32>> {
    logits
        .iter_rows()
        .enumerate()
        .map(|(row, r)| {
            if r.iter().any(|v| v.is_nan()) {
                return Err(Error::NonFinite {
                    what: "logits (NaN)",
                    row,
                });
            }
            let mut best = 0;
            for (i, &v) in r.iter().enumerate().skip(1) {
                if v > r[best] {
                    best = i;
                }
            }
            Ok(best as u32)
        })
        .collect()
}

pub fn accuracy(predictions: &[u32], labels: &[u32]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len() as f64
}

pub fn l2_norm(row: &[f32]) -> f64 {
    libm::sqrt(row.iter().map(|&v| (v as f64) * (v as f64)).sum())
}

/// Scales every row to unit L2 norm. Zero rows are an error, never NaN.
pub fn normalize_features(features: &Matrix<f32>) -> Result<Matrix<f32>> {
    let mut out = features.clone();
    for i in 0..out.rows() {
        normalize_row(out.row_mut(i)).map_err(|_| Error::ZeroNorm { row: i })?;
    }
    Ok(out)
}

pub(crate) fn normalize_row(row: &mut [f32]) -> Result<()> {
    let norm = l2_norm(row);
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::ZeroNorm { row: 0 });
    }
    for v in row.iter_mut() {
        *v = (*v as f64 / norm) as f32;
    }
    Ok(())
}

/// Softmax temperature of one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature(f64);

impl Temperature {
    pub const IDENTITY: Temperature = Temperature(1.0);

    pub fn new(t: f64) -> Result<Self> {
        if t > 0.0 && t.is_finite() {
            Ok(Temperature(t))
        } else {
            Err(Error::InvalidParameter(format!("temperature must be > 0, got {t}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

pub fn apply_temperature(logits: &Matrix<f32>, t: Temperature) -> Matrix<f32> {
    let data = logits
        .as_slice()
        .iter()
        .map(|&v| (v as f64 / t.0) as f32)
        .collect();
    Matrix::from_vec(logits.rows(), logits.cols(), data).expect("same shape")
}

/// Mean negative log-likelihood of `softmax(logits / t)`.
pub fn mean_nll(logits: &Matrix<f32>, labels: &[u32], t: f64) -> f64 {
    let total: f64 = logits
        .iter_rows()
        .zip(labels)
        .map(|(r, &y)| {
            let scaled = r.iter().map(move |&v| v as f64 / t);
            log_sum_exp(scaled) - r[y as usize] as f64 / t
        })
        .sum();
    total / labels.len() as f64
}

const LOG_T_MIN: f64 = -2.995_732_273_553_991; // ln 0.05
const LOG_T_MAX: f64 = 2.995_732_273_553_991; // ln 20
const T_TOLERANCE: f64 = 1e-4;

/// Fits a single temperature by golden-section search of the mean NLL over
/// `ln T` in `[ln 0.05, ln 20]`.
///
/// The NLL is convex in `1/T`, hence unimodal in `ln T`.
pub fn fit_temperature(logits: &Matrix<f32>, labels: &[u32]) -> Result<Temperature> {
    if logits.rows() != labels.len() {
        return Err(Error::ShapeMismatch {
            what: "labels vs logit rows",
            expected: logits.rows(),
            found: labels.len(),
        });
    }
    if labels.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            found: labels.len(),
        });
    }
    check_labels(labels, logits.cols())?;
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Degenerate(
            "temperature fitting needs at least two distinct labels".into(),
        ));
    }
    check_finite(logits, "logits")?;

    let inv_phi = (libm::sqrt(5.0) - 1.0) / 2.0;
    let f = |u: f64| mean_nll(logits, labels, libm::exp(u));
    let (mut lo, mut hi) = (LOG_T_MIN, LOG_T_MAX);
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while libm::exp(hi) - libm::exp(lo) > T_TOLERANCE {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    Temperature::new(libm::exp((lo + hi) / 2.0))
}
