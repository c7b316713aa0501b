//! Command-line interface.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use vrf_core::analysis::{self, FrontierMethod};
use vrf_core::baselines::DetectorKind;
use vrf_core::ensemble::{EnsembleConfig, QueryEncoder, Space};
use vrf_core::knn::ExactKnn;
use vrf_core::synth::SynthSpec;
use vrf_core::weighting::{parse_values, sweep_grid, GridSpec, WeightFunction, WeightKind};
use vrf_core::zsf::ZsfIndex;

use crate::error::{Error, Result};
use crate::index_io::{load_index, save_index};
use crate::manifest::Manifest;
use crate::pipeline::Pipeline;
use crate::report::{self, parse_extended};
use crate::{bench, synth_io};

#[derive(Debug, Parser)]
#[command(name = "vrf", version, about = "Sample-wise zero-shot / fine-tuned ensembling")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Suppress the stdout summary.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the zero-shot failure index from the id-train split.
    BuildZsf {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        p_percent: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one ensembling config on test splits; writes result JSON.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// e.g. `sigmoid:a=1.5,b=0.6`, `constant:alpha=0.5`, `binary:a=1.2`.
        #[arg(long)]
        weight: WeightFunction,
        #[arg(long, value_enum, default_value_t = SpaceArg::Prob)]
        space: SpaceArg,
        /// Comma-separated split names (default: all test splits).
        #[arg(long, value_delimiter = ',')]
        splits: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid search on a validation split; writes `grid.csv` and
    /// `selected.json` into the output directory.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        kind: KindArg,
        /// Split name or role (`id-val` selects the first id-val split).
        #[arg(long, default_value = "id-val")]
        select_on: String,
        #[arg(long, value_enum, default_value_t = SpaceArg::Prob)]
        space: SpaceArg,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// ID / mean-OOD accuracy for every grid point; writes CSV.
    Frontier {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Selective prediction with OOD detectors; writes report JSON.
    Baselines {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "msp,energy,md,rmd,knn")]
        detectors: Vec<String>,
        #[arg(long, default_value_t = 0.95)]
        tpr: f64,
        /// Sets k for the kNN detector.
        #[arg(long, default_value_t = 0.1)]
        p_percent: f64,
        /// Fixed threshold instead of calibration; accepts `inf` / `-inf`.
        #[arg(long, allow_hyphen_values = true)]
        lambda: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ratio curve, residual statistics and per-bin optimal weights; writes
    /// `ratio_curve.csv`, `residual_stats.json`, `binned_gopt.csv`.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ratio_curve: bool,
        #[arg(long)]
        residual_stats: bool,
        #[arg(long)]
        binned_gopt: bool,
        /// Comma-separated split names (default: all test splits).
        #[arg(long, value_delimiter = ',')]
        splits: Vec<String>,
        /// Bin centers as a list or `lo:hi:step` (default 0.2:1.8:0.2).
        #[arg(long)]
        bin_centers: Option<String>,
        #[arg(long, default_value_t = analysis::DEFAULT_HALFWIDTH)]
        halfwidth: f64,
        /// Use raw instead of temperature-scaled probabilities for residuals.
        #[arg(long)]
        no_calibration: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset (manifest + tensors).
    Synth {
        /// JSON spec; missing fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// k-NN latency on the calling thread.
    Bench {
        /// Index to query; random unit members when absent.
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long, default_value_t = 100_000)]
        members: usize,
        #[arg(long, default_value_t = 512)]
        dims: usize,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, default_value_t = 1000)]
        queries: usize,
        /// One-at-a-time queries to time.
        #[arg(long, default_value_t = 50)]
        single: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Temperature-scale both models (fitted on id-val) before combining.
    #[arg(long)]
    pub calibrate: bool,
    /// Encoder whose features query the index.
    #[arg(long, value_enum, default_value_t = EncoderArg::Ft)]
    pub query_features: EncoderArg,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Values of `a`: a list or `lo:hi:step`.
    #[arg(long)]
    pub a_values: Option<String>,
    #[arg(long)]
    pub b_values: Option<String>,
    #[arg(long)]
    pub alpha_values: Option<String>,
}

impl GridArgs {
    fn spec(&self) -> Result<GridSpec> {
        let mut g = GridSpec::default();
        if let Some(s) = &self.a_values {
            g.a = parse_values(s)?;
        }
        if let Some(s) = &self.b_values {
            g.b = parse_values(s)?;
        }
        if let Some(s) = &self.alpha_values {
            g.alpha = parse_values(s)?;
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SpaceArg {
    Prob,
    Logit,
}

impl From<SpaceArg> for Space {
    fn from(s: SpaceArg) -> Space {
        match s {
            SpaceArg::Prob => Space::Prob,
            SpaceArg::Logit => Space::Logit,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum KindArg {
    Constant,
    Sigmoid,
    Linear,
    Binary,
}

impl From<KindArg> for WeightKind {
    fn from(k: KindArg) -> WeightKind {
        match k {
            KindArg::Constant => WeightKind::Constant,
            KindArg::Sigmoid => WeightKind::Sigmoid,
            KindArg::Linear => WeightKind::Linear,
            KindArg::Binary => WeightKind::Binary,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Ose,
    Lse,
    #[value(alias = "vrf-grid")]
    Vrf,
}

impl From<MethodArg> for FrontierMethod {
    fn from(m: MethodArg) -> FrontierMethod {
        match m {
            MethodArg::Ose => FrontierMethod::Ose,
            MethodArg::Lse => FrontierMethod::Lse,
            MethodArg::Vrf => FrontierMethod::Vrf,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EncoderArg {
    Ft,
    Zs,
}

impl From<EncoderArg> for QueryEncoder {
    fn from(e: EncoderArg) -> QueryEncoder {
        match e {
            EncoderArg::Ft => QueryEncoder::Ft,
            EncoderArg::Zs => QueryEncoder::Zs,
        }
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{what} `{}` does not exist", path.display())))
    }
}

fn require_out_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(Error::Usage(format!(
            "output directory `{}` does not exist",
            p.display()
        ))),
        _ => Ok(()),
    }
}

fn make_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn check_percent(p: f64) -> Result<()> {
    if p > 0.0 && p <= 100.0 {
        Ok(())
    } else {
        Err(Error::Usage(format!("--p-percent must be in (0, 100], got {p}")))
    }
}

impl Common {
    fn open(&self) -> Result<(Pipeline, Option<ZsfIndex>)> {
        require_file(&self.manifest, "manifest")?;
        if let Some(i) = &self.index {
            require_file(i, "index")?;
        }
        let pipeline = Pipeline::new(Manifest::load(&self.manifest)?).with_encoder(self.query_features.into());
        let index = self.index.as_deref().map(load_index).transpose()?;
        Ok((pipeline, index))
    }
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

/// Runs a parsed command and returns the stdout summary.
pub fn execute(cli: &Cli) -> Result<String> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Usage("--threads must be >= 1".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut out = String::new();
    match &cli.command {
        Command::BuildZsf {
            manifest,
            p_percent,
            out: path,
        } => {
            check_percent(*p_percent)?;
            require_file(manifest, "manifest")?;
            require_out_parent(path)?;
            let pipeline = Pipeline::new(Manifest::load(manifest)?);
            let index = pipeline.build_zsf(*p_percent)?;
            save_index(&index, path)?;
            writeln!(out, "|V| = {}  k = {}  p = {}%", index.len(), index.k(), index.p_percent()).unwrap();
            if index.is_empty() {
                writeln!(out, "warning: the ZSF set is empty; distance-based weights will fail").unwrap();
            }
        }
        Command::Evaluate {
            common,
            weight,
            space,
            splits,
            out: path,
        } => {
            require_out_parent(path)?;
            let (pipeline, index) = common.open()?;
            let splits = if splits.is_empty() { pipeline.test_splits() } else { splits.clone() };
            let config = EnsembleConfig {
                space: (*space).into(),
                weight_fn: *weight,
                use_calibration: common.calibrate,
            };
            let results = pipeline.evaluate(&splits, index.as_ref(), &config)?;
            report::write_json(path, &results)?;
            writeln!(out, "{weight} ({:?} space)", config.space).unwrap();
            writeln!(out, "{:<16} {:>8} {:>8} {:>8}", "split", "acc", "mean_w", "n").unwrap();
            for r in &results {
                writeln!(out, "{:<16} {:>8} {:>8.3} {:>8}", r.split, pct(r.accuracy), r.mean_weight, r.n).unwrap();
            }
        }
        Command::Sweep {
            common,
            kind,
            select_on,
            space,
            grid,
            out: dir,
        } => {
            let grid = grid.spec()?;
            let weights = sweep_grid((*kind).into(), &grid)?;
            if weights.is_empty() {
                return Err(Error::Usage("the sweep grid is empty".into()));
            }
            let (pipeline, index) = common.open()?;
            let split = match select_on.as_str() {
                "id-val" => pipeline.manifest().val_name().to_string(),
                name => pipeline.manifest().entry(name)?.name.clone(),
            };
            let configs: Vec<EnsembleConfig> = weights
                .into_iter()
                .map(|w| EnsembleConfig {
                    space: (*space).into(),
                    weight_fn: w,
                    use_calibration: common.calibrate,
                })
                .collect();
            let outcome = pipeline.sweep(&split, index.as_ref(), &configs)?;
            make_dir(dir)?;
            report::write_sweep_csv(&dir.join("grid.csv"), &outcome.candidates)?;
            report::write_json(&dir.join("selected.json"), &outcome.selected)?;
            writeln!(
                out,
                "{} configs on `{}`; selected {} ({}%)",
                outcome.candidates.len(),
                outcome.split,
                outcome.selected.config.weight_fn,
                pct(outcome.selected.accuracy)
            )
            .unwrap();
        }
        Command::Frontier {
            common,
            method,
            grid,
            out: path,
        } => {
            require_out_parent(path)?;
            let configs: Vec<EnsembleConfig> = FrontierMethod::from(*method)
                .configs(&grid.spec()?)?
                .into_iter()
                .map(|c| EnsembleConfig {
                    use_calibration: common.calibrate,
                    ..c
                })
                .collect();
            if configs.is_empty() {
                return Err(Error::Usage("the frontier grid is empty".into()));
            }
            let (pipeline, index) = common.open()?;
            let f = pipeline.frontier(index.as_ref(), &configs)?;
            report::write_frontier_csv(path, &f.points, &f.ood_splits)?;
            writeln!(out, "{} points; ID = `{}`, OOD = {:?}", f.points.len(), f.id_split, f.ood_splits).unwrap();
            let best_id = f.points.iter().max_by(|a, b| a.id_accuracy.total_cmp(&b.id_accuracy)).unwrap();
            let best_ood = f.points.iter().max_by(|a, b| a.ood_mean.total_cmp(&b.ood_mean)).unwrap();
            for (label, p) in [("best ID", best_id), ("best OOD", best_ood)] {
                writeln!(out, "{label:<9} {} ID {} OOD {}", p.config.weight_fn, pct(p.id_accuracy), pct(p.ood_mean)).unwrap();
            }
        }
        Command::Baselines {
            manifest,
            detectors,
            tpr,
            p_percent,
            lambda,
            out: path,
        } => {
            check_percent(*p_percent)?;
            if !(*tpr > 0.0 && *tpr <= 1.0) {
                return Err(Error::Usage(format!("--tpr must be in (0, 1], got {tpr}")));
            }
            let kinds = detectors
                .iter()
                .map(|d| d.parse::<DetectorKind>())
                .collect::<vrf_core::Result<Vec<_>>>()?;
            if kinds.is_empty() {
                return Err(Error::Usage("no detectors given".into()));
            }
            let lambda = lambda.as_deref().map(parse_extended).transpose().map_err(Error::Usage)?;
            require_file(manifest, "manifest")?;
            require_out_parent(path)?;
            let pipeline = Pipeline::new(Manifest::load(manifest)?);
            let reports = pipeline.baselines(&kinds, *tpr, *p_percent, lambda)?;
            report::write_json(path, &reports)?;
            for r in &reports {
                let ood: Vec<String> = r.ood_acc.iter().map(|(k, v)| format!("{k} {}", pct(*v))).collect();
                writeln!(out, "{:<7} lambda {:>10.4}  ID {}  {}", r.detector, r.lambda, pct(r.id_acc), ood.join("  ")).unwrap();
            }
        }
        Command::Analyze {
            common,
            ratio_curve,
            residual_stats,
            binned_gopt,
            splits,
            bin_centers,
            halfwidth,
            no_calibration,
            out: dir,
        } => {
            if !(*ratio_curve || *residual_stats || *binned_gopt) {
                return Err(Error::Usage(
                    "choose at least one of --ratio-curve, --residual-stats, --binned-gopt".into(),
                ));
            }
            let centers = match bin_centers {
                Some(s) => parse_values(s)?,
                None => analysis::default_bin_centers(),
            };
            let (pipeline, index) = common.open()?;
            let needs_index = *ratio_curve || *binned_gopt;
            let index = match (needs_index, index) {
                (true, None) => return Err(Error::Usage("--ratio-curve and --binned-gopt need --index".into())),
                (_, i) => i,
            };
            let splits = if splits.is_empty() { pipeline.test_splits() } else { splits.clone() };
            let calibration = if *no_calibration { None } else { Some(pipeline.calibration()?) };
            make_dir(dir)?;
            if *ratio_curve {
                let curve = pipeline.ratio_curve(index.as_ref().unwrap(), &splits, &centers, *halfwidth)?;
                report::write_ratio_csv(&dir.join("ratio_curve.csv"), &curve)?;
                let (x, y): (Vec<f64>, Vec<f64>) = curve.defined().into_iter().unzip();
                match analysis::spearman(&x, &y) {
                    Some(rho) => writeln!(out, "ratio curve: {} defined bins, Spearman {rho:.3}", x.len()),
                    None => writeln!(out, "ratio curve: {} defined bins", x.len()),
                }
                .unwrap();
            }
            if *residual_stats {
                let s = pipeline.residual_stats(&splits, calibration.as_ref())?;
                report::write_json(&dir.join("residual_stats.json"), &s)?;
                writeln!(
                    out,
                    "residuals: V_zs {:.4}  V_ft {:.4}  C {:.4}  g* {:?}",
                    s.var_zs, s.var_ft, s.cov, s.g_opt_correlated
                )
                .unwrap();
            }
            if *binned_gopt {
                let bins = pipeline.binned_optimal_weight(index.as_ref().unwrap(), &splits, calibration.as_ref(), &centers, *halfwidth)?;
                report::write_binned_csv(&dir.join("binned_gopt.csv"), &bins)?;
                let g: Vec<String> = bins
                    .iter()
                    .map(|b| b.g_opt().map_or("NA".into(), |g| format!("{g:.3}")))
                    .collect();
                writeln!(out, "binned g*: {}", g.join(" ")).unwrap();
            }
        }
        Command::Synth { spec, seed, out: dir } => {
            let mut s: SynthSpec = match spec {
                Some(p) => {
                    require_file(p, "spec")?;
                    report::read_json(p).map_err(|e| Error::Usage(e.to_string()))?
                }
                None => SynthSpec::default(),
            };
            if let Some(seed) = seed {
                s.seed = *seed;
            }
            s.validate()?;
            let manifest = synth_io::generate_to(dir, &s)?;
            writeln!(out, "wrote {}", manifest.display()).unwrap();
        }
        Command::Bench {
            index,
            members,
            dims,
            k,
            queries,
            single,
            repeats,
            seed,
            out: path,
        } => {
            if let Some(p) = path {
                require_out_parent(p)?;
            }
            let (engine, k, dim) = match index {
                Some(p) => {
                    require_file(p, "index")?;
                    let idx = load_index(p)?;
                    let k = if *k == 0 { idx.k() } else { *k };
                    (idx.engine().clone(), k, idx.dim())
                }
                None => {
                    if *members == 0 || *dims == 0 {
                        return Err(Error::Usage("--members and --dims must be >= 1".into()));
                    }
                    (ExactKnn::new(&bench::random_unit_rows(*members, *dims, *seed)?), *k, *dims)
                }
            };
            if k == 0 || k > engine.len() {
                return Err(Error::Usage(format!("--k must be in 1..={}", engine.len())));
            }
            let q = bench::random_unit_rows(*queries, dim, seed.wrapping_add(1))?;
            let r = bench::run(&engine, &q, k, *single, *repeats)?;
            if let Some(p) = path {
                report::write_json(p, &r)?;
            }
            writeln!(out, "M = {}  D = {}  k = {}  kernel = {}", r.members, r.dim, r.k, r.kernel).unwrap();
            writeln!(out, "single query: median {:.3} ms  p90 {:.3} ms", r.single_median_ms, r.single_p90_ms).unwrap();
            writeln!(
                out,
                "batch of {}: median {:.3} ms/query  spread {:.1}%",
                r.queries,
                r.batch_median_ms,
                100.0 * r.batch_spread
            )
            .unwrap();
        }
    }
    Ok(out)
}
