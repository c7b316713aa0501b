//! Maps from ZSF distance to the weight placed on the fine-tuned model.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Weight on the fine-tuned model as a function of the distance `d`.
///
/// - `Sigmoid`: `1 / (1 + exp((d - a) / b))`
/// - `Linear`: `clamp(-b * (d - a), 0, 1)`
/// - `Binary`: `1` if `d < a`, else `0`
/// - `Constant`: `alpha`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase", try_from = "RawWeightFunction")]
pub enum WeightFunction {
    Sigmoid { a: f64, b: f64 },
    Linear { a: f64, b: f64 },
    Binary { a: f64 },
    Constant { alpha: f64 },
}

#[derive(Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase", deny_unknown_fields)]
enum RawWeightFunction {
    Sigmoid { a: f64, b: f64 },
    Linear { a: f64, b: f64 },
    Binary { a: f64 },
    Constant { alpha: f64 },
}

impl TryFrom<RawWeightFunction> for WeightFunction {
    type Error = Error;

    fn try_from(raw: RawWeightFunction) -> Result<Self> {
        match raw {
            RawWeightFunction::Sigmoid { a, b } => WeightFunction::sigmoid(a, b),
            RawWeightFunction::Linear { a, b } => WeightFunction::linear(a, b),
            RawWeightFunction::Binary { a } => WeightFunction::binary(a),
            RawWeightFunction::Constant { alpha } => WeightFunction::constant(alpha),
        }
    }
}

fn check_a(a: f64) -> Result<()> {
    if a.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("a must be finite, got {a}")))
    }
}

fn check_b(b: f64) -> Result<()> {
    if b > 0.0 && b.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("b must be > 0, got {b}")))
    }
}

impl WeightFunction {
    pub fn sigmoid(a: f64, b: f64) -> Result<Self> {
        check_a(a)?;
        check_b(b)?;
        Ok(WeightFunction::Sigmoid { a, b })
    }

    pub fn linear(a: f64, b: f64) -> Result<Self> {
        check_a(a)?;
        check_b(b)?;
        Ok(WeightFunction::Linear { a, b })
    }

    pub fn binary(a: f64) -> Result<Self> {
        check_a(a)?;
        Ok(WeightFunction::Binary { a })
    }

    pub fn constant(alpha: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&alpha) {
            Ok(WeightFunction::Constant { alpha })
        } else {
            Err(Error::InvalidParameter(format!(
                "alpha must be in [0, 1], got {alpha}"
            )))
        }
    }

    pub fn kind(&self) -> WeightKind {
        match self {
            WeightFunction::Sigmoid { .. } => WeightKind::Sigmoid,
            WeightFunction::Linear { .. } => WeightKind::Linear,
            WeightFunction::Binary { .. } => WeightKind::Binary,
            WeightFunction::Constant { .. } => WeightKind::Constant,
        }
    }

    /// Whether the weight ignores the distance (no index needed).
    pub fn is_constant(&self) -> bool {
        matches!(self, WeightFunction::Constant { .. })
    }

    pub fn a(&self) -> Option<f64> {
        match *self {
            WeightFunction::Sigmoid { a, .. }
            | WeightFunction::Linear { a, .. }
            | WeightFunction::Binary { a } => Some(a),
            WeightFunction::Constant { .. } => None,
        }
    }

    pub fn b(&self) -> Option<f64> {
        match *self {
            WeightFunction::Sigmoid { b, .. } | WeightFunction::Linear { b, .. } => Some(b),
            _ => None,
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match *self {
            WeightFunction::Constant { alpha } => Some(alpha),
            _ => None,
        }
    }

    /// Weight for distance `d`, which is clamped to `[0, 2]` first.
    pub fn weight(&self, d: f64) -> Result<f64> {
        if !d.is_finite() {
            return Err(Error::NonFinite {
                what: "distance",
                row: 0,
            });
        }
        let d = d.clamp(0.0, 2.0);
        Ok(match *self {
            WeightFunction::Sigmoid { a, b } => sigmoid(-(d - a) / b),
            WeightFunction::Linear { a, b } => (-b * (d - a)).clamp(0.0, 1.0),
            WeightFunction::Binary { a } => {
                if d < a {
                    1.0
                } else {
                    0.0
                }
            }
            WeightFunction::Constant { alpha } => alpha,
        })
    }

    pub fn weight_batch(&self, distances: &[f64]) -> Result<Vec<f64>> {
        distances
            .iter()
            .enumerate()
            .map(|(row, &d)| {
                self.weight(d).map_err(|_| Error::NonFinite {
                    what: "distance",
                    row,
                })
            })
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

impl fmt::Display for WeightFunction {
    /// `kind:key=value,...`, the inverse of [`FromStr`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            WeightFunction::Sigmoid { a, b } => write!(f, "sigmoid:a={a},b={b}"),
            WeightFunction::Linear { a, b } => write!(f, "linear:a={a},b={b}"),
            WeightFunction::Binary { a } => write!(f, "binary:a={a}"),
            WeightFunction::Constant { alpha } => write!(f, "constant:alpha={alpha}"),
        }
    }
}

impl FromStr for WeightFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |msg: &str| Error::InvalidParameter(format!("weight `{s}`: {msg}"));
        let (kind, params) = s.split_once(':').unwrap_or((s, ""));
        let kind: WeightKind = kind.parse()?;
        let (mut a, mut b, mut alpha) = (None, None, None);
        for pair in params.split(',').filter(|p| !p.is_empty()) {
            let (key, value) = pair.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let value: f64 = value.trim().parse().map_err(|_| bad("value is not a number"))?;
            let slot = match key.trim() {
                "a" => &mut a,
                "b" => &mut b,
                "alpha" => &mut alpha,
                _ => return Err(bad("unknown key")),
            };
            if slot.replace(value).is_some() {
                return Err(bad("duplicate key"));
            }
        }
        let need = |v: Option<f64>, name: &str| v.ok_or_else(|| bad(&format!("missing `{name}`")));
        let parsed = match kind {
            WeightKind::Sigmoid | WeightKind::Linear if alpha.is_some() => {
                return Err(bad("unexpected `alpha`"))
            }
            WeightKind::Sigmoid => WeightFunction::sigmoid(need(a, "a")?, need(b, "b")?)?,
            WeightKind::Linear => WeightFunction::linear(need(a, "a")?, need(b, "b")?)?,
            WeightKind::Binary if b.is_some() || alpha.is_some() => {
                return Err(bad("binary takes only `a`"))
            }
            WeightKind::Binary => WeightFunction::binary(need(a, "a")?)?,
            WeightKind::Constant if a.is_some() || b.is_some() => {
                return Err(bad("constant takes only `alpha`"))
            }
            WeightKind::Constant => WeightFunction::constant(need(alpha, "alpha")?)?,
        };
        Ok(parsed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Sigmoid,
    Linear,
    Binary,
    Constant,
}

impl FromStr for WeightKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sigmoid" => Ok(WeightKind::Sigmoid),
            "linear" => Ok(WeightKind::Linear),
            "binary" => Ok(WeightKind::Binary),
            "constant" => Ok(WeightKind::Constant),
            other => Err(Error::InvalidParameter(format!("unknown weight kind `{other}`"))),
        }
    }
}

impl fmt::Display for WeightKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightKind::Sigmoid => "sigmoid",
            WeightKind::Linear => "linear",
            WeightKind::Binary => "binary",
            WeightKind::Constant => "constant",
        })
    }
}

/// Hyperparameter values enumerated by [`sweep_grid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// `{lo, lo + 1, ..., hi} / 10`, exact in decimal.
pub fn tenths(lo: u32, hi: u32) -> Vec<f64> {
    (lo..=hi).map(|i| i as f64 / 10.0).collect()
}

impl Default for GridSpec {
    /// a in {0.1, ..., 1.9}, b in {0.1, ..., 2.0}, alpha in {0.0, ..., 1.0}.
    fn default() -> Self {
        GridSpec {
            a: tenths(1, 19),
            b: tenths(1, 20),
            alpha: tenths(0, 10),
        }
    }
}

/// All weight functions of one kind on the grid, a-major then b.
pub fn sweep_grid(kind: WeightKind, grid: &GridSpec) -> Result<Vec<WeightFunction>> {
    let mut out = Vec::new();
    match kind {
        WeightKind::Constant => {
            for &alpha in &grid.alpha {
                out.push(WeightFunction::constant(alpha)?);
            }
        }
        WeightKind::Binary => {
            for &a in &grid.a {
                out.push(WeightFunction::binary(a)?);
            }
        }
        WeightKind::Sigmoid | WeightKind::Linear => {
            for &a in &grid.a {
                for &b in &grid.b {
                    out.push(if kind == WeightKind::Sigmoid {
                        WeightFunction::sigmoid(a, b)?
                    } else {
                        WeightFunction::linear(a, b)?
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Parses a comma separated list of numbers, or `lo:hi:step`.
pub fn parse_values(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidParameter(format!("bad value list `{s}`"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() == 3 {
        let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let step: f64 = parts[2].trim().parse().map_err(|_| bad())?;
        if !(step > 0.0) || !lo.is_finite() || !hi.is_finite() {
            return Err(bad());
        }
        let n = libm::floor((hi - lo) / step + 1e-9);
        if n < 0.0 {
            return Ok(Vec::new());
        }
        return Ok((0..=n as usize).map(|i| lo + i as f64 * step).collect());
    }
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect()
}
