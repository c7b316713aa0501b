//! Manifest-level workflows: build the index, evaluate, sweep, frontier,
//! selective-prediction baselines and the analyses.

use std::collections::BTreeMap;

use rayon::prelude::*;
use vrf_core::analysis::{self, Candidate, FrontierPoint, RatioCurve, ResidualStats, WeightBin};
use vrf_core::baselines::{calibrate_threshold, selective_predict, DetectorKind, OodScorer};
use vrf_core::ensemble::{Calibration, EnsembleConfig, PreparedSplit, QueryEncoder, SplitEvaluation};
use vrf_core::outputs::{accuracy, predict, softmax, SplitData, SplitRole};
use vrf_core::weighting::WeightFunction;
use vrf_core::zsf::ZsfIndex;
use vrf_core::Matrix;

use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::report::{BaselineReport, RunResult};

/// Rows per parallel task in batch distance queries.
const QUERY_CHUNK: usize = 256;

/// k-th neighbor distances for every row, spread over the rayon pool. The
/// output does not depend on the number of threads.
pub fn parallel_distances(index: &ZsfIndex, queries: &Matrix<f32>) -> Result<Vec<f64>> {
    if queries.rows() <= QUERY_CHUNK {
        return Ok(index.distances(queries)?);
    }
    let cols = queries.cols();
    let chunks: Vec<Vec<f64>> = queries
        .as_slice()
        .par_chunks(QUERY_CHUNK * cols.max(1))
        .map(|rows| {
            let m = Matrix::from_vec(rows.len() / cols, cols, rows.to_vec())?;
            index.distances(&m)
        })
        .collect::<vrf_core::Result<_>>()?;
    Ok(chunks.concat())
}

pub struct Pipeline {
    manifest: Manifest,
    encoder: QueryEncoder,
}

pub struct SweepOutcome {
    pub split: String,
    pub candidates: Vec<Candidate>,
    pub selected: Candidate,
}

pub struct FrontierOutcome {
    pub id_split: String,
    pub ood_splits: Vec<String>,
    pub points: Vec<FrontierPoint>,
}

impl Pipeline {
    pub fn new(manifest: Manifest) -> Self {
        Pipeline {
            manifest,
            encoder: QueryEncoder::default(),
        }
    }

    pub fn with_encoder(self, encoder: QueryEncoder) -> Self {
        Pipeline { encoder, ..self }
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn load(&self, name: &str) -> Result<SplitData> {
        self.manifest.load_split(name)
    }

    pub fn build_zsf(&self, p_percent: f64) -> Result<ZsfIndex> {
        let t = self.load(self.manifest.train_name())?;
        Ok(ZsfIndex::build(&t.labels, &t.zs.logits, &t.ft.logits, &t.ft.features, p_percent)?)
    }

    /// Temperatures fitted on the first id-val split.
    pub fn calibration(&self) -> Result<Calibration> {
        Ok(Calibration::fit(&self.load(self.manifest.val_name())?)?)
    }

    pub fn distances(&self, index: &ZsfIndex, data: &SplitData) -> Result<Vec<f64>> {
        if index.is_empty() {
            return Err(vrf_core::Error::EmptyIndex.into());
        }
        parallel_distances(index, &data.outputs(self.encoder.tag()).features)
    }

    pub fn prepare<'a>(
        &self,
        data: &'a SplitData,
        index: Option<&ZsfIndex>,
        calibration: Option<&Calibration>,
    ) -> Result<PreparedSplit<'a>> {
        let distances = index.map(|i| self.distances(i, data)).transpose()?;
        Ok(PreparedSplit::with_distances(data, distances, calibration)?)
    }

    fn calibration_for(&self, config: &EnsembleConfig) -> Result<Option<Calibration>> {
        config.use_calibration.then(|| self.calibration()).transpose()
    }

    fn index_for<'i>(&self, index: Option<&'i ZsfIndex>, weight_fn: &WeightFunction) -> Result<Option<&'i ZsfIndex>> {
        if weight_fn.is_constant() {
            return Ok(None);
        }
        match index {
            Some(i) if i.is_empty() => Err(vrf_core::Error::EmptyIndex.into()),
            Some(i) => Ok(Some(i)),
            None => Err(Error::Usage(format!("weight `{weight_fn}` needs a ZSF index"))),
        }
    }

    /// Distances, weights, ensemble and accuracy on one split.
    pub fn vrf_pipeline(&self, split: &str, index: Option<&ZsfIndex>, config: &EnsembleConfig) -> Result<SplitEvaluation> {
        let data = self.load(split)?;
        let calibration = self.calibration_for(config)?;
        let index = self.index_for(index, &config.weight_fn)?;
        Ok(self
            .prepare(&data, index, calibration.as_ref())?
            .evaluate(&config.weight_fn, config.space)?)
    }

    /// Test splits (id-test, then ood-test) in manifest order.
    pub fn test_splits(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .manifest
            .names_with_role(SplitRole::IdTest)
            .into_iter()
            .map(String::from)
            .collect();
        names.extend(self.manifest.names_with_role(SplitRole::OodTest).into_iter().map(String::from));
        names
    }

    pub fn evaluate(&self, splits: &[String], index: Option<&ZsfIndex>, config: &EnsembleConfig) -> Result<Vec<RunResult>> {
        let calibration = self.calibration_for(config)?;
        let index = self.index_for(index, &config.weight_fn)?;
        splits
            .iter()
            .map(|name| {
                let data = self.load(name)?;
                let (accuracy, mean_weight) = self
                    .prepare(&data, index, calibration.as_ref())?
                    .score(&config.weight_fn, config.space)?;
                Ok(RunResult {
                    split: name.clone(),
                    config: *config,
                    accuracy,
                    mean_weight,
                    n: data.len(),
                })
            })
            .collect()
    }

    /// Scores every config on `split` and selects by accuracy with the
    /// documented tie rules.
    pub fn sweep(&self, split: &str, index: Option<&ZsfIndex>, configs: &[EnsembleConfig]) -> Result<SweepOutcome> {
        let data = self.load(split)?;
        let candidates = self.score_configs(&data, index, configs)?;
        let selected = *analysis::select_hyperparams(&candidates)
            .ok_or_else(|| Error::Usage("the sweep grid is empty".into()))?;
        Ok(SweepOutcome {
            split: split.into(),
            candidates,
            selected,
        })
    }

    fn score_configs(&self, data: &SplitData, index: Option<&ZsfIndex>, configs: &[EnsembleConfig]) -> Result<Vec<Candidate>> {
        let needs_index = configs.iter().any(|c| !c.weight_fn.is_constant());
        let index = if needs_index {
            self.index_for(index, &configs.iter().find(|c| !c.weight_fn.is_constant()).unwrap().weight_fn)?
        } else {
            None
        };
        let mut by_calibration: [Option<PreparedSplit<'_>>; 2] = [None, None];
        for flag in [false, true] {
            if configs.iter().any(|c| c.use_calibration == flag) {
                let cal = if flag { Some(self.calibration()?) } else { None };
                by_calibration[flag as usize] = Some(self.prepare(data, index, cal.as_ref())?);
            }
        }
        configs
            .par_iter()
            .map(|c| {
                let prepared = by_calibration[c.use_calibration as usize].as_ref().expect("prepared above");
                Ok(Candidate {
                    config: *c,
                    accuracy: prepared.score(&c.weight_fn, c.space)?.0,
                })
            })
            .collect()
    }

    /// Frontier over the first id-test split and every ood-test split.
    pub fn frontier(&self, index: Option<&ZsfIndex>, configs: &[EnsembleConfig]) -> Result<FrontierOutcome> {
        let id_split = self
            .manifest
            .names_with_role(SplitRole::IdTest)
            .first()
            .map(|s| s.to_string())
            .ok_or_else(|| Error::Manifest("frontier needs an id-test split".into()))?;
        let ood_splits: Vec<String> = self
            .manifest
            .names_with_role(SplitRole::OodTest)
            .into_iter()
            .map(String::from)
            .collect();
        if ood_splits.is_empty() {
            return Err(Error::Manifest("frontier needs at least one ood-test split".into()));
        }
        let needs_index = configs.iter().find(|c| !c.weight_fn.is_constant());
        let index = match needs_index {
            Some(c) => self.index_for(index, &c.weight_fn)?,
            None => None,
        };
        let calibrated = configs.iter().any(|c| c.use_calibration);
        if calibrated && configs.iter().any(|c| !c.use_calibration) {
            return Err(Error::Usage("mixed calibrated and raw configs in one frontier".into()));
        }
        let calibration = if calibrated { Some(self.calibration()?) } else { None };

        let id_data = self.load(&id_split)?;
        let ood_data = ood_splits.iter().map(|s| self.load(s)).collect::<Result<Vec<_>>>()?;
        let id = self.prepare(&id_data, index, calibration.as_ref())?;
        let oods = ood_data
            .iter()
            .map(|d| self.prepare(d, index, calibration.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let points = configs
            .par_iter()
            .map(|c| analysis::frontier(&id, &oods, std::slice::from_ref(c)).map(|mut v| v.remove(0)))
            .collect::<vrf_core::Result<Vec<_>>>()?;
        Ok(FrontierOutcome {
            id_split,
            ood_splits,
            points,
        })
    }

    /// Fits each detector on id-train, sets the threshold for `tpr` on the
    /// first id-val split (or uses `lambda_override`), and reports accuracy
    /// on the first id-test split and every ood-test split.
    pub fn baselines(
        &self,
        detectors: &[DetectorKind],
        tpr: f64,
        p_percent: f64,
        lambda_override: Option<f64>,
    ) -> Result<Vec<BaselineReport>> {
        let train = self.load(self.manifest.train_name())?;
        let val = self.load(self.manifest.val_name())?;
        let id_name = self
            .manifest
            .names_with_role(SplitRole::IdTest)
            .first()
            .map(|s| s.to_string())
            .ok_or_else(|| Error::Manifest("baselines need an id-test split".into()))?;
        let id = self.load(&id_name)?;
        let oods: Vec<(String, SplitData)> = self
            .manifest
            .names_with_role(SplitRole::OodTest)
            .into_iter()
            .map(|n| Ok((n.to_string(), self.load(n)?)))
            .collect::<Result<_>>()?;

        let routed_accuracy = |scorer: &OodScorer, lambda: f64, data: &SplitData| -> Result<f64> {
            let scores = self.scores(scorer, data)?;
            let preds = selective_predict(&scores, lambda, &predict(&data.zs.logits)?, &predict(&data.ft.logits)?)?;
            Ok(accuracy(&preds, &data.labels))
        };
        detectors
            .iter()
            .map(|&kind| {
                let scorer = OodScorer::fit(kind, &train, p_percent)?;
                let lambda = match lambda_override {
                    Some(l) => l,
                    None => calibrate_threshold(&self.scores(&scorer, &val)?, tpr)?,
                };
                let mut ood_acc = BTreeMap::new();
                for (name, data) in &oods {
                    ood_acc.insert(name.clone(), routed_accuracy(&scorer, lambda, data)?);
                }
                Ok(BaselineReport {
                    detector: kind.to_string(),
                    lambda,
                    id_acc: routed_accuracy(&scorer, lambda, &id)?,
                    ood_acc,
                })
            })
            .collect()
    }

    /// Detector scores; kNN distances go through the parallel path.
    pub fn scores(&self, scorer: &OodScorer, data: &SplitData) -> Result<Vec<f64>> {
        match scorer {
            OodScorer::Knn(index) => Ok(parallel_distances(index, &data.ft.features)?.into_iter().map(|d| -d).collect()),
            s => Ok(s.score_split(data)?),
        }
    }

    /// Ratio curve over the pooled `splits`.
    pub fn ratio_curve(&self, index: &ZsfIndex, splits: &[String], centers: &[f64], halfwidth: f64) -> Result<RatioCurve> {
        let (mut d, mut zp, mut fp, mut y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for name in splits {
            let data = self.load(name)?;
            d.extend(self.distances(index, &data)?);
            zp.extend(predict(&data.zs.logits)?);
            fp.extend(predict(&data.ft.logits)?);
            y.extend_from_slice(&data.labels);
        }
        Ok(analysis::ratio_curve(&d, &zp, &fp, &y, centers, halfwidth)?)
    }

    /// True-class residuals of both models over the pooled `splits`, after
    /// temperature scaling when `calibration` is given.
    pub fn residuals(&self, splits: &[String], calibration: Option<&Calibration>, index: Option<&ZsfIndex>) -> Result<Residuals> {
        let mut out = Residuals::default();
        for name in splits {
            let data = self.load(name)?;
            let (zs, ft) = match calibration {
                Some(c) => (
                    vrf_core::outputs::apply_temperature(&data.zs.logits, c.zs),
                    vrf_core::outputs::apply_temperature(&data.ft.logits, c.ft),
                ),
                None => (data.zs.logits.clone(), data.ft.logits.clone()),
            };
            out.zs.extend(analysis::residuals(&softmax(&zs)?, &data.labels)?);
            out.ft.extend(analysis::residuals(&softmax(&ft)?, &data.labels)?);
            if let Some(index) = index {
                out.distances.extend(self.distances(index, &data)?);
            }
        }
        Ok(out)
    }

    pub fn residual_stats(&self, splits: &[String], calibration: Option<&Calibration>) -> Result<ResidualStats> {
        let r = self.residuals(splits, calibration, None)?;
        Ok(analysis::residual_stats(&r.zs, &r.ft)?)
    }

    pub fn binned_optimal_weight(
        &self,
        index: &ZsfIndex,
        splits: &[String],
        calibration: Option<&Calibration>,
        centers: &[f64],
        halfwidth: f64,
    ) -> Result<Vec<WeightBin>> {
        let r = self.residuals(splits, calibration, Some(index))?;
        Ok(analysis::binned_optimal_weight(&r.distances, &r.zs, &r.ft, centers, halfwidth)?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Residuals {
    pub zs: Vec<f64>,
    pub ft: Vec<f64>,
    /// Empty unless an index was given.
    pub distances: Vec<f64>,
}
