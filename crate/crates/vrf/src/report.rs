//! JSON and CSV artifacts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use vrf_core::analysis::{Candidate, FrontierPoint, RatioCurve, ResidualStats, WeightBin};
use vrf_core::ensemble::EnsembleConfig;

use crate::error::{Error, Result};
use crate::tensor_io::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub split: String,
    pub config: EnsembleConfig,
    pub accuracy: f64,
    pub mean_weight: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub detector: String,
    /// Infinite thresholds are written as the strings "inf" / "-inf".
    #[serde(serialize_with = "ser_extended", deserialize_with = "de_extended")]
    pub lambda: f64,
    pub id_acc: f64,
    pub ood_acc: BTreeMap<String, f64>,
}

fn ser_extended<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

fn de_extended<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Str(s) => parse_extended(&s).map_err(serde::de::Error::custom),
    }
}

/// A float, or `inf` / `+inf` / `-inf`.
pub fn parse_extended(s: &str) -> std::result::Result<f64, String> {
    match s.trim() {
        "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
        "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
        t => t
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| format!("expected a number or ±inf, got `{s}`")),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn na(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |v| v.to_string())
}

fn config_json(c: &EnsembleConfig) -> String {
    serde_json::to_string(c).expect("config serializes")
}

fn finish(path: &Path, w: csv::Writer<Vec<u8>>) -> Result<()> {
    let bytes = w.into_inner().map_err(|e| Error::Internal(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// `center,ratio,count`, with `NA` for undefined ratios.
pub fn write_ratio_csv(path: &Path, curve: &RatioCurve) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["center", "ratio", "count"])?;
    for i in 0..curve.bin_centers.len() {
        w.write_record([
            curve.bin_centers[i].to_string(),
            na(curve.ratio[i]),
            curve.counts[i].to_string(),
        ])?;
    }
    finish(path, w)
}

/// `config,id_acc,ood_acc_mean,<one column per OOD split>`; the config
/// column holds the JSON serialization.
pub fn write_frontier_csv(path: &Path, points: &[FrontierPoint], ood_names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["config".to_string(), "id_acc".into(), "ood_acc_mean".into()];
    header.extend(ood_names.iter().cloned());
    w.write_record(&header)?;
    for p in points {
        let mut row = vec![config_json(&p.config), p.id_accuracy.to_string(), p.ood_mean.to_string()];
        row.extend(p.ood_accuracies.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    finish(path, w)
}

/// `config,accuracy`.
pub fn write_sweep_csv(path: &Path, candidates: &[Candidate]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["config", "accuracy"])?;
    for c in candidates {
        w.write_record([config_json(&c.config), c.accuracy.to_string()])?;
    }
    finish(path, w)
}

/// `center,count,var_zs,var_ft,cov,g_opt`, with `NA` where undefined.
pub fn write_binned_csv(path: &Path, bins: &[WeightBin]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["center", "count", "var_zs", "var_ft", "cov", "g_opt"])?;
    for b in bins {
        let s: Option<&ResidualStats> = b.stats.as_ref();
        w.write_record([
            b.center.to_string(),
            b.count.to_string(),
            na(s.map(|s| s.var_zs)),
            na(s.map(|s| s.var_ft)),
            na(s.map(|s| s.cov)),
            na(b.g_opt()),
        ])?;
    }
    finish(path, w)
}
