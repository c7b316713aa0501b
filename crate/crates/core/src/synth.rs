//! Seeded synthetic datasets with a planted zero-shot failure structure, and
//! correlated Gaussian residual streams.
//!
//! Each sample has a class `c` and a shift `s` in `[0, 1]`. Its features lie
//! on the unit sphere near `(1 - s) A_c + s B_c` for per-class anchors `A_c`
//! ("in-domain") and `B_c` ("shifted style"); each encoder has its own
//! anchors. Whether each model classifies the sample correctly is drawn
//! directly, with the fine-tuned model's accuracy falling and the zero-shot
//! model's accuracy rising as `s` grows. Logits are perturbed one-hot
//! log-probabilities whose argmax is exactly the drawn prediction.
//!
//! A `zsf_fraction` share of the training split is planted at small shift
//! with "fine-tuned right, zero-shot wrong"; no other training row has that
//! outcome, so the ZSF set is exactly the planted rows.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::outputs::{ModelOutputs, ModelTag, SplitData, SplitRole};
use crate::{Error, Matrix, Result};

/// Identifier of the pseudo-random generator: ChaCha8 seeded with
/// `seed_from_u64`, as implemented by `rand_chacha` 0.9.
pub const RNG_ALGORITHM: &str = "chacha8/seed_from_u64/rand_chacha-0.9";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_id_test: usize,
    /// Rows per OOD split.
    pub n_ood_test: usize,
    pub n_ood_splits: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Share of training rows planted in the ZSF region.
    pub zsf_fraction: f64,
    /// Upper end of the shift range of planted ZSF rows.
    pub zsf_shift_max: f64,
    /// ID splits draw `s ~ U(0, id_shift_max)`.
    pub id_shift_max: f64,
    /// OOD split `j` of `n` draws `s ~ U(lo, lo + ood_width)` with
    /// `lo = ood_distance_shift * j / n`, clipped to 1.
    pub ood_distance_shift: f64,
    pub ood_width: f64,
    /// Accuracy at `s = 0` and `s = 1`, linear in between.
    pub ft_acc_near: f64,
    pub ft_acc_far: f64,
    pub zs_acc_near: f64,
    pub zs_acc_far: f64,
    /// Per-coordinate standard deviation of feature noise.
    pub feature_noise: f64,
    /// Standard deviation of the noise on non-predicted logits.
    pub logit_noise: f64,
    /// Probability on the predicted class: `U(min, max)`, separately for
    /// correct and wrong predictions.
    pub confidence_correct: (f64, f64),
    pub confidence_wrong: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_train: 5000,
            n_val: 2000,
            n_id_test: 2000,
            n_ood_test: 2000,
            n_ood_splits: 2,
            dim: 32,
            num_classes: 10,
            seed: 0,
            zsf_fraction: 0.2,
            zsf_shift_max: 0.3,
            id_shift_max: 0.5,
            ood_distance_shift: 0.5,
            ood_width: 0.5,
            ft_acc_near: 0.95,
            ft_acc_far: 0.3,
            zs_acc_near: 0.45,
            zs_acc_far: 0.85,
            feature_noise: 0.04,
            logit_noise: 0.3,
            confidence_correct: (0.5, 0.95),
            confidence_wrong: (0.35, 0.8),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.dim < 2 {
            return bad(alloc::format!("dim must be >= 2, got {}", self.dim));
        }
        if self.num_classes < 2 {
            return bad(alloc::format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        // Two anchors per class per encoder; beyond this they crowd the sphere.
        if self.num_classes > 16 * self.dim {
            return bad(alloc::format!(
                "{} classes cannot be separated in {} dimensions (max {})",
                self.num_classes,
                self.dim,
                16 * self.dim
            ));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_id_test == 0 {
            return bad("split sizes must be positive".into());
        }
        if self.n_ood_splits == 0 || self.n_ood_test == 0 {
            return bad("need at least one non-empty OOD split".into());
        }
        if !(0.0..1.0).contains(&self.zsf_fraction) {
            return bad(alloc::format!("zsf_fraction must be in [0, 1), got {}", self.zsf_fraction));
        }
        let unit = [
            ("zsf_shift_max", self.zsf_shift_max),
            ("id_shift_max", self.id_shift_max),
            ("ood_distance_shift", self.ood_distance_shift),
            ("ood_width", self.ood_width),
            ("ft_acc_near", self.ft_acc_near),
            ("ft_acc_far", self.ft_acc_far),
            ("zs_acc_near", self.zs_acc_near),
            ("zs_acc_far", self.zs_acc_far),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return bad(alloc::format!("{name} must be in [0, 1], got {v}"));
            }
        }
        for (name, v) in [("feature_noise", self.feature_noise), ("logit_noise", self.logit_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(alloc::format!("{name} must be >= 0, got {v}"));
            }
        }
        // The predicted logit is forced to be the strict maximum, so any
        // confidence in (0, 1) is usable.
        for (name, (lo, hi)) in [
            ("confidence_correct", self.confidence_correct),
            ("confidence_wrong", self.confidence_wrong),
        ] {
            if !(lo > 0.0 && lo <= hi && hi < 1.0) {
                return bad(alloc::format!(
                    "{name} must satisfy 0 < min <= max < 1, got ({lo}, {hi})"
                ));
            }
        }
        Ok(())
    }

    fn ft_acc(&self, s: f64) -> f64 {
        self.ft_acc_near + (self.ft_acc_far - self.ft_acc_near) * s
    }

    fn zs_acc(&self, s: f64) -> f64 {
        self.zs_acc_near + (self.zs_acc_far - self.zs_acc_near) * s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSplit {
    pub name: String,
    pub role: SplitRole,
    pub data: SplitData,
    /// Per-row shift `s`.
    pub shift: Vec<f64>,
    /// Rows planted in the ZSF region (training split only).
    pub planted_zsf: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub num_classes: usize,
    pub splits: Vec<SynthSplit>,
}

impl SynthDataset {
    pub fn split(&self, name: &str) -> Option<&SynthSplit> {
        self.splits.iter().find(|s| s.name == name)
    }

    pub fn by_role(&self, role: SplitRole) -> impl Iterator<Item = &SynthSplit> + '_ {
        self.splits.iter().filter(move |s| s.role == role)
    }
}

struct Anchors {
    near: Vec<Vec<f64>>,
    far: Vec<Vec<f64>>,
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl Anchors {
    fn new(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Self {
        let mut gen = || (0..spec.num_classes).map(|_| random_unit(rng, spec.dim)).collect();
        let near = gen();
        let far = gen();
        Anchors { near, far }
    }

    fn feature(&self, rng: &mut ChaCha8Rng, class: usize, s: f64, noise: f64, out: &mut Vec<f32>) {
        let dim = self.near[class].len();
        let mut v: Vec<f64> = (0..dim)
            .map(|j| {
                let e: f64 = rng.sample(StandardNormal);
                (1.0 - s) * self.near[class][j] + s * self.far[class][j] + noise * e
            })
            .collect();
        let mut norm = libm::sqrt(v.iter().map(|x| x * x).sum());
        if norm < 1e-9 {
            v = random_unit(rng, dim);
            norm = 1.0;
        }
        out.extend(v.iter().map(|x| (x / norm) as f32));
    }
}

struct Row {
    class: u32,
    shift: f64,
    zs_correct: bool,
    ft_correct: bool,
    planted: bool,
}

fn logits_row(rng: &mut ChaCha8Rng, spec: &SynthSpec, label: u32, correct: bool, out: &mut Vec<f32>) {
    let k = spec.num_classes;
    let predicted = if correct {
        label as usize
    } else {
        let other = rng.random_range(0..k - 1);
        if other >= label as usize {
            other + 1
        } else {
            other
        }
    };
    let (lo, hi) = if correct {
        spec.confidence_correct
    } else {
        spec.confidence_wrong
    };
    let conf = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let top = libm::log(conf);
    let rest = libm::log((1.0 - conf) / (k - 1) as f64);
    for j in 0..k {
        let e: f64 = rng.sample(StandardNormal);
        let z = if j == predicted {
            top
        } else {
            (rest + spec.logit_noise * e).min(top - 1e-3)
        };
        out.push(z as f32);
    }
}

fn build_split(
    rng: &mut ChaCha8Rng,
    spec: &SynthSpec,
    zs_anchors: &Anchors,
    ft_anchors: &Anchors,
    name: &str,
    role: SplitRole,
    rows: Vec<Row>,
) -> Result<SynthSplit> {
    let n = rows.len();
    let (mut fz, mut ff, mut lz, mut lf) = (
        Vec::with_capacity(n * spec.dim),
        Vec::with_capacity(n * spec.dim),
        Vec::with_capacity(n * spec.num_classes),
        Vec::with_capacity(n * spec.num_classes),
    );
    for r in &rows {
        let c = r.class as usize;
        zs_anchors.feature(rng, c, r.shift, spec.feature_noise, &mut fz);
        ft_anchors.feature(rng, c, r.shift, spec.feature_noise, &mut ff);
        logits_row(rng, spec, r.class, r.zs_correct, &mut lz);
        logits_row(rng, spec, r.class, r.ft_correct, &mut lf);
    }
    let zs = ModelOutputs::new(
        Matrix::from_vec(n, spec.dim, fz)?,
        Matrix::from_vec(n, spec.num_classes, lz)?,
        ModelTag::Zs,
    )?;
    let ft = ModelOutputs::new(
        Matrix::from_vec(n, spec.dim, ff)?,
        Matrix::from_vec(n, spec.num_classes, lf)?,
        ModelTag::Ft,
    )?;
    let labels = rows.iter().map(|r| r.class).collect();
    Ok(SynthSplit {
        name: name.into(),
        role,
        data: SplitData::new(zs, ft, labels)?,
        shift: rows.iter().map(|r| r.shift).collect(),
        planted_zsf: rows.iter().map(|r| r.planted).collect(),
    })
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn free_rows(rng: &mut ChaCha8Rng, spec: &SynthSpec, n: usize, lo: f64, hi: f64) -> Vec<Row> {
    (0..n)
        .map(|_| {
            let s = uniform(rng, lo, hi);
            Row {
                class: rng.random_range(0..spec.num_classes as u32),
                shift: s,
                ft_correct: rng.random_bool(spec.ft_acc(s)),
                zs_correct: rng.random_bool(spec.zs_acc(s)),
                planted: false,
            }
        })
        .collect()
}

fn train_rows(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Vec<Row> {
    (0..spec.n_train)
        .map(|_| {
            let class = rng.random_range(0..spec.num_classes as u32);
            if rng.random_bool(spec.zsf_fraction) {
                return Row {
                    class,
                    shift: uniform(rng, 0.0, spec.zsf_shift_max),
                    ft_correct: true,
                    zs_correct: false,
                    planted: true,
                };
            }
            let s = uniform(rng, 0.0, spec.id_shift_max);
            // Redraw the outcome until it is not "ft right, zs wrong".
            loop {
                let ft_correct = rng.random_bool(spec.ft_acc(s));
                let zs_correct = rng.random_bool(spec.zs_acc(s));
                if !(ft_correct && !zs_correct) {
                    return Row {
                        class,
                        shift: s,
                        ft_correct,
                        zs_correct,
                        planted: false,
                    };
                }
            }
        })
        .collect()
}

/// Generates `train` (id-train), `val` (id-val), `id_test` (id-test) and
/// `ood_1..ood_n` (ood-test). Deterministic in `spec`.
pub fn generate_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    if spec.ft_acc_near >= 1.0 && spec.zs_acc_near <= 0.0 && spec.zsf_fraction < 1.0 {
        return Err(Error::InvalidParameter(
            "non-planted training rows can never avoid the ZSF outcome at s = 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let zs_anchors = Anchors::new(&mut rng, spec);
    let ft_anchors = Anchors::new(&mut rng, spec);

    let mut splits = Vec::with_capacity(3 + spec.n_ood_splits);
    let rows = train_rows(&mut rng, spec);
    splits.push(build_split(&mut rng, spec, &zs_anchors, &ft_anchors, "train", SplitRole::IdTrain, rows)?);
    let rows = free_rows(&mut rng, spec, spec.n_val, 0.0, spec.id_shift_max);
    splits.push(build_split(&mut rng, spec, &zs_anchors, &ft_anchors, "val", SplitRole::IdVal, rows)?);
    let rows = free_rows(&mut rng, spec, spec.n_id_test, 0.0, spec.id_shift_max);
    splits.push(build_split(&mut rng, spec, &zs_anchors, &ft_anchors, "id_test", SplitRole::IdTest, rows)?);
    for j in 1..=spec.n_ood_splits {
        let lo = (spec.ood_distance_shift * j as f64 / spec.n_ood_splits as f64).min(1.0);
        let hi = (lo + spec.ood_width).min(1.0);
        let rows = free_rows(&mut rng, spec, spec.n_ood_test, lo, hi);
        let name = alloc::format!("ood_{j}");
        splits.push(build_split(&mut rng, spec, &zs_anchors, &ft_anchors, &name, SplitRole::OodTest, rows)?);
    }
    Ok(SynthDataset {
        num_classes: spec.num_classes,
        splits,
    })
}

/// Two jointly Gaussian zero-mean streams with variances `var_zs`, `var_ft`
/// and correlation `corr`, via the Cholesky factor of their covariance.
pub fn generate_residual_pair(
    n: usize,
    var_zs: f64,
    var_ft: f64,
    corr: f64,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(var_zs >= 0.0 && var_ft >= 0.0 && var_zs.is_finite() && var_ft.is_finite()) {
        return Err(Error::InvalidParameter(alloc::format!(
            "variances must be >= 0, got ({var_zs}, {var_ft})"
        )));
    }
    if !(-1.0..=1.0).contains(&corr) {
        return Err(Error::InvalidParameter(alloc::format!(
            "correlation must be in [-1, 1], got {corr}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sz, sf) = (libm::sqrt(var_zs), libm::sqrt(var_ft));
    let ortho = libm::sqrt(1.0 - corr * corr);
    let mut zs = Vec::with_capacity(n);
    let mut ft = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        zs.push(sz * a);
        ft.push(sf * (corr * a + ortho * b));
    }
    Ok((zs, ft))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::outputs::{l2_norm, predict};
    use crate::zsf::ZsfIndex;

    fn small() -> SynthSpec {
        SynthSpec {
            n_train: 400,
            n_val: 100,
            n_id_test: 100,
            n_ood_test: 100,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&SynthSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn features_are_unit_norm_and_predictions_as_drawn() {
        let data = generate_dataset(&small()).unwrap();
        assert_eq!(data.splits.len(), 5);
        for split in &data.splits {
            for row in split.data.ft.features.iter_rows().chain(split.data.zs.features.iter_rows()) {
                assert!((l2_norm(row) - 1.0).abs() < 1e-6);
            }
        }
        let train = data.split("train").unwrap();
        let zs = predict(&train.data.zs.logits).unwrap();
        let ft = predict(&train.data.ft.logits).unwrap();
        for i in 0..train.data.len() {
            let y = train.data.labels[i];
            assert_eq!(train.planted_zsf[i], ft[i] == y && zs[i] != y);
        }
    }

    #[test]
    fn zero_fraction_gives_empty_index() {
        let data = generate_dataset(&SynthSpec {
            zsf_fraction: 0.0,
            ..small()
        })
        .unwrap();
        let t = &data.split("train").unwrap().data;
        let idx = ZsfIndex::build(&t.labels, &t.zs.logits, &t.ft.logits, &t.ft.features, 0.1).unwrap();
        assert!(idx.is_empty());
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SynthSpec { dim: 1, ..small() },
            SynthSpec { num_classes: 1, ..small() },
            SynthSpec { num_classes: 1000, dim: 8, ..small() },
            SynthSpec { zsf_fraction: 1.0, ..small() },
            SynthSpec { ft_acc_near: 1.5, ..small() },
            SynthSpec { confidence_wrong: (0.6, 0.5), ..small() },
            SynthSpec { n_ood_splits: 0, ..small() },
        ] {
            assert!(generate_dataset(&spec).is_err(), "{spec:?}");
        }
    }

    #[test]
    fn residual_pair_degenerate_correlation() {
        let (a, b) = generate_residual_pair(1000, 1.0, 1.0, 1.0, 5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(generate_residual_pair(10, 1.0, 1.0, 1.5, 0).is_err());
        assert!(generate_residual_pair(10, -1.0, 1.0, 0.0, 0).is_err());
    }
}
