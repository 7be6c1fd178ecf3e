//! Metrics, experiment protocols, policy ranking and report files.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{normalize, split, DataError, DomainDataset, DomainTag, Episode, NormStats, SplitPlan};
use crate::model::{CdaModel, Dims, ModelConfig, ModelError, XSource};
use crate::trainer::{train, RunFiles, TrainConfig, TrainError, TrainState};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metrics need equal non-zero lengths, got {0} and {1}")]
    Lengths(usize, usize),
    #[error("no seeds given")]
    NoSeeds,
    #[error("no horizons given")]
    NoHorizons,
    #[error("no results to report")]
    EmptyResults,
    #[error("empty candidate set")]
    NoCandidates,
    #[error("window {start}..{end} does not fit episode '{id}' of length {len}")]
    Window { id: String, start: usize, end: usize, len: usize },
    #[error("{0}")]
    Protocol(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("report: {0}")]
    Io(#[from] std::io::Error),
    #[error("report: {0}")]
    Csv(#[from] csv::Error),
    #[error("report: {0}")]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    /// `None` when the true series is constant.
    pub r2: Option<f64>,
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
}

pub fn metrics(y_true: &[f64], y_pred: &[f64]) -> Result<MetricSet, EvalError> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(EvalError::Lengths(y_true.len(), y_pred.len()));
    }
    let n = y_true.len() as f64;
    let mean = y_true.iter().sum::<f64>() / n;
    let sse: f64 = y_true.iter().zip(y_pred).map(|(y, p)| (p - y) * (p - y)).sum();
    let sst: f64 = y_true.iter().map(|y| (mean - y) * (mean - y)).sum();
    let abs: f64 = y_true.iter().zip(y_pred).map(|(y, p)| (p - y).abs()).sum();
    Ok(MetricSet {
        r2: (sst > 0.0).then(|| 1.0 - sse / sst),
        rmse: (sse / n).sqrt(),
        mae: abs / n,
        n: y_true.len(),
    })
}

/// Unweighted mean over wells; `r2` averages the wells where it is defined.
pub fn mean_metrics(sets: &[MetricSet]) -> Option<MetricSet> {
    if sets.is_empty() {
        return None;
    }
    let k = sets.len() as f64;
    let r2s: Vec<f64> = sets.iter().filter_map(|m| m.r2).collect();
    Some(MetricSet {
        r2: (!r2s.is_empty()).then(|| r2s.iter().sum::<f64>() / r2s.len() as f64),
        rmse: sets.iter().map(|m| m.rmse).sum::<f64>() / k,
        mae: sets.iter().map(|m| m.mae).sum::<f64>() / k,
        n: sets.iter().map(|m| m.n).sum(),
    })
}

/// Produces normalised outcome forecasts for positions `split..len` of an
/// episode from its prefix `0..split`.
pub trait SuffixForecaster: Sync {
    fn forecast_suffix(&self, episode: &Episode, split: usize) -> Result<Vec<f64>, EvalError>;
}

/// Reads the answer off the episode itself.
pub struct PerfectOracle;

impl SuffixForecaster for PerfectOracle {
    fn forecast_suffix(&self, episode: &Episode, split: usize) -> Result<Vec<f64>, EvalError> {
        Ok(episode.y[split..].to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateFeed {
    /// Future covariates come from the model's own rollout.
    Rollout,
    /// Future covariates are read from the data.
    Observed,
}

pub struct ModelForecaster<'a> {
    pub model: &'a CdaModel,
    pub tag: DomainTag,
    pub covariates: CovariateFeed,
}

impl SuffixForecaster for ModelForecaster<'_> {
    fn forecast_suffix(&self, episode: &Episode, split: usize) -> Result<Vec<f64>, EvalError> {
        if split == 0 || split >= episode.len() {
            return Err(EvalError::Window {
                id: episode.id.clone(),
                start: split,
                end: episode.len(),
                len: episode.len(),
            });
        }
        let history = episode.slice(0, split);
        let future_z = &episode.z[split - 1..episode.len() - 1];
        let xs = match self.covariates {
            CovariateFeed::Rollout => XSource::Rollout,
            CovariateFeed::Observed => XSource::Observed(&episode.x[split..]),
        };
        Ok(self.model.forecast(&history, future_z, self.tag, xs)?.y_hat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cda,
    /// λ = 0: both domains trained jointly with no domain loss.
    Lambda0,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Cda => "cda",
            Method::Lambda0 => "lambda0",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub taus: Vec<usize>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    pub cross_well_fraction: f64,
    /// Forecast horizon scored on held-out wells in the cross-well protocol.
    pub cross_well_tau: usize,
    /// Treatment whose presence in the source domain the cross-well
    /// contrast toggles.
    pub target_policy: Option<String>,
    pub covariates: CovariateFeed,
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            taus: vec![36, 24, 12, 6],
            seeds: vec![0, 1, 2, 3, 4],
            methods: vec![Method::Cda, Method::Lambda0],
            cross_well_fraction: 0.8,
            cross_well_tau: 12,
            target_policy: None,
            covariates: CovariateFeed::Rollout,
            jobs: 1,
        }
    }
}

/// Everything needed to train and score one experiment cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub tau: usize,
    pub seed: u64,
    pub split: String,
    pub r2: Option<f64>,
    pub rmse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerWellRow {
    pub method: String,
    pub tau: usize,
    pub seed: u64,
    pub split: String,
    pub well: String,
    pub r2: Option<f64>,
    pub rmse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Which episode slices fed normalisation statistics and training.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataAccess {
    /// `(split, id, first month, length)`.
    pub norm: Vec<(String, String, i64, usize)>,
    pub train: Vec<(String, String, i64, usize)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ResultRow>,
    pub per_well: Vec<PerWellRow>,
    pub series: Vec<PlotSeries>,
    pub access: DataAccess,
}

impl ExperimentReport {
    pub fn merge(&mut self, other: ExperimentReport) {
        self.rows.extend(other.rows);
        self.per_well.extend(other.per_well);
        self.series.extend(other.series);
        self.access.norm.extend(other.access.norm);
        self.access.train.extend(other.access.train);
    }

    /// Mean target RMSE of `method` over all rows matching `split`.
    pub fn mean_rmse(&self, method: Method, split: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method.as_str() && r.split == split)
            .map(|r| r.rmse)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_r2(&self, method: Method, split: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method.as_str() && r.split == split)
            .filter_map(|r| r.r2)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

struct Prepared {
    split_name: String,
    tau: usize,
    seed_bound: Option<u64>,
    stats: NormStats,
    source: DomainDataset,
    target: DomainDataset,
    /// Normalised full eval episodes and the raw ones.
    eval_norm: Vec<Episode>,
    eval_raw: Vec<Episode>,
    dims: Dims,
    access: DataAccess,
}

fn slices(tag: &str, ds: &DomainDataset) -> Vec<(String, String, i64, usize)> {
    ds.episodes
        .iter()
        .map(|e| (tag.to_string(), e.id.clone(), e.start_month, e.len()))
        .collect()
}

fn prepare(
    split_name: String,
    tau: usize,
    seed_bound: Option<u64>,
    source_train: DomainDataset,
    target_train: DomainDataset,
    eval_raw: Vec<Episode>,
) -> Result<Prepared, EvalError> {
    if source_train.is_empty() || target_train.is_empty() {
        return Err(EvalError::Protocol(format!("{split_name}: a training domain is empty")));
    }
    let source_train = source_train.with_tag(DomainTag::Source);
    let target_train = target_train.with_tag(DomainTag::Target);
    let (source, stats) = normalize(&source_train, None)?;
    let (target, _) = normalize(&target_train, Some(&stats))?;
    let eval_norm = eval_raw.iter().map(|e| stats.apply(e)).collect();
    let access = DataAccess {
        norm: slices("source", &source_train),
        train: [slices("source", &source_train), slices("target", &target_train)].concat(),
    };
    Ok(Prepared {
        split_name,
        tau,
        seed_bound,
        dims: Dims {
            d_x: source.d_x,
            k: source.k(),
            u_dim: source.u_dim,
        },
        stats,
        source,
        target,
        eval_norm,
        eval_raw,
        access,
    })
}

fn score(
    prep: &Prepared,
    forecaster: &dyn SuffixForecaster,
    method: &str,
    seed: u64,
) -> Result<(ResultRow, Vec<PerWellRow>, Vec<PlotSeries>), EvalError> {
    let mut per_well = Vec::with_capacity(prep.eval_norm.len());
    let mut sets = Vec::with_capacity(prep.eval_norm.len());
    let mut series = Vec::new();
    for (norm, raw) in prep.eval_norm.iter().zip(&prep.eval_raw) {
        let cut = norm.len() - prep.tau;
        let pred: Vec<f64> = forecaster
            .forecast_suffix(norm, cut)?
            .into_iter()
            .map(|v| prep.stats.y_to_raw(v))
            .collect();
        let m = metrics(&raw.y[cut..], &pred)?;
        if series.is_empty() {
            let base = format!("{method}/{}/tau{}/seed{seed}/{}", prep.split_name, prep.tau, raw.id);
            let months: Vec<f64> = raw.months().skip(cut).map(|m| m as f64).collect();
            series.push(PlotSeries {
                name: format!("{base}/forecast"),
                points: months.iter().copied().zip(pred.iter().copied()).collect(),
            });
            series.push(PlotSeries {
                name: format!("{base}/actual"),
                points: months.iter().copied().zip(raw.y[cut..].iter().copied()).collect(),
            });
        }
        per_well.push(PerWellRow {
            method: method.to_string(),
            tau: prep.tau,
            seed,
            split: prep.split_name.clone(),
            well: raw.id.clone(),
            r2: m.r2,
            rmse: m.rmse,
            mae: m.mae,
        });
        sets.push(m);
    }
    let mean = mean_metrics(&sets).ok_or_else(|| EvalError::Protocol("no evaluation wells".into()))?;
    Ok((
        ResultRow {
            method: method.to_string(),
            tau: prep.tau,
            seed,
            split: prep.split_name.clone(),
            r2: mean.r2,
            rmse: mean.rmse,
            mae: mean.mae,
        },
        per_well,
        series,
    ))
}

/// Trains the model of one cell. Exposed so callers can inspect the
/// trained state behind a reported number.
pub fn train_cell(
    source: &DomainDataset,
    target: &DomainDataset,
    dims: Dims,
    spec: &ExperimentSpec,
    method: Method,
    seed: u64,
) -> Result<TrainState, EvalError> {
    let mut cfg = spec.train.clone();
    cfg.seed = seed;
    if method == Method::Lambda0 {
        cfg.lambda = 0.0;
    }
    let model = CdaModel::new(spec.model.clone(), dims, seed)?;
    let state = TrainState::new(cfg, model, source, target)?;
    Ok(train(state, source, target, &RunFiles::default())?)
}

fn run_cells(
    preps: &[Prepared],
    spec: &ExperimentSpec,
    injected: Option<&dyn SuffixForecaster>,
) -> Result<ExperimentReport, EvalError> {
    if spec.eval.seeds.is_empty() {
        return Err(EvalError::NoSeeds);
    }
    let mut cells = Vec::new();
    for (pi, p) in preps.iter().enumerate() {
        for &seed in &spec.eval.seeds {
            if p.seed_bound.is_some_and(|s| s != seed) {
                continue;
            }
            for &m in &spec.eval.methods {
                cells.push((pi, seed, m));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(spec.eval.jobs.max(1)).build()?;
    let results: Vec<Result<_, EvalError>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(pi, seed, method)| {
                let p = &preps[pi];
                match injected {
                    Some(f) => score(p, f, method.as_str(), seed),
                    None => {
                        let st = train_cell(&p.source, &p.target, p.dims, spec, method, seed)?;
                        let f = ModelForecaster {
                            model: &st.model,
                            tag: DomainTag::Target,
                            covariates: spec.eval.covariates,
                        };
                        score(p, &f, method.as_str(), seed)
                    }
                }
            })
            .collect()
    });
    let mut report = ExperimentReport::default();
    for p in preps {
        report.access.norm.extend(p.access.norm.iter().cloned());
        report.access.train.extend(p.access.train.iter().cloned());
    }
    for r in results {
        let (row, wells, series) = r?;
        report.rows.push(row);
        report.per_well.extend(wells);
        report.series.extend(series);
    }
    Ok(report)
}

/// Holds out the last `τ` steps of every target well and forecasts them
/// from the prefix. Without a separate source, the target prefixes double
/// as the source domain.
pub fn run_inside_well(
    source: Option<&DomainDataset>,
    target: &DomainDataset,
    spec: &ExperimentSpec,
    injected: Option<&dyn SuffixForecaster>,
) -> Result<ExperimentReport, EvalError> {
    if spec.eval.taus.is_empty() {
        return Err(EvalError::NoHorizons);
    }
    if spec.eval.seeds.is_empty() {
        return Err(EvalError::NoSeeds);
    }
    if let Some(s) = source {
        s.check_compatible(target)?;
    }
    let mut preps = Vec::new();
    for &tau in &spec.eval.taus {
        let (prefix, _) = split(target, &SplitPlan::inside_well(tau))?;
        let src = source.cloned().unwrap_or_else(|| prefix.clone());
        preps.push(prepare("inside_well".into(), tau, None, src, prefix, target.episodes.clone())?);
    }
    run_cells(&preps, spec, injected)
}

/// Splits target wells into disjoint train and held-out sets (per seed)
/// and forecasts the last `cross_well_tau` steps of held-out wells. With
/// `with_policy = false`, source wells that ever receive the target policy
/// are dropped.
pub fn run_cross_well(
    source: Option<&DomainDataset>,
    target: &DomainDataset,
    spec: &ExperimentSpec,
    with_policy: bool,
    injected: Option<&dyn SuffixForecaster>,
) -> Result<ExperimentReport, EvalError> {
    if spec.eval.seeds.is_empty() {
        return Err(EvalError::NoSeeds);
    }
    if target.len() < 2 {
        return Err(EvalError::Protocol(format!(
            "cross-well evaluation needs at least 2 wells, found {}",
            target.len()
        )));
    }
    if let Some(s) = source {
        s.check_compatible(target)?;
    }
    let policy = match &spec.eval.target_policy {
        Some(name) => Some(target.vocabulary.iter().position(|v| v == name).ok_or_else(|| {
            EvalError::Protocol(format!("target policy '{name}' is not in the vocabulary"))
        })?),
        None => None,
    };
    let tau = spec.eval.cross_well_tau;
    let split_name = if with_policy {
        "cross_well_with_policy"
    } else {
        "cross_well_without_policy"
    };
    let mut preps = Vec::new();
    for &seed in &spec.eval.seeds {
        let (train_wells, held_out) = split(target, &SplitPlan::cross_well(spec.eval.cross_well_fraction, seed))?;
        if let Some(e) = held_out.episodes.iter().find(|e| e.len() <= tau) {
            return Err(EvalError::Window {
                id: e.id.clone(),
                start: e.len().saturating_sub(tau),
                end: e.len(),
                len: e.len(),
            });
        }
        let mut src = source.cloned().unwrap_or_else(|| train_wells.clone());
        if let (false, Some(z)) = (with_policy, policy) {
            let kept = src.episodes.iter().filter(|e| !e.ever_receives(z)).cloned().collect();
            src = src.with_episodes(kept);
        }
        preps.push(prepare(split_name.into(), tau, Some(seed), src, train_wells, held_out.episodes)?);
    }
    run_cells(&preps, spec, injected)
}

/// A candidate or reference arm in a policy comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyChoice {
    Treatment(usize),
    /// The treatments actually logged over the window.
    Observed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrajectory {
    pub policy: PolicyChoice,
    pub name: String,
    /// Outcome contrast against the reference, in raw units, per window step.
    pub cate: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl PolicyTrajectory {
    pub fn increment(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRanking {
    pub episode: String,
    pub window_start: usize,
    pub window_len: usize,
    pub reference: PolicyChoice,
    pub trajectories: Vec<PolicyTrajectory>,
    /// Indices into `trajectories`, best final increment first.
    pub order: Vec<usize>,
}

impl PolicyRanking {
    pub fn ranked_policies(&self) -> Vec<PolicyChoice> {
        self.order.iter().map(|&i| self.trajectories[i].policy).collect()
    }

    pub fn series(&self) -> Vec<PlotSeries> {
        let mut out = Vec::new();
        for tr in &self.trajectories {
            let t0 = (self.window_start + 1) as f64;
            let pts = |v: &[f64]| v.iter().enumerate().map(|(i, &y)| (t0 + i as f64, y)).collect();
            out.push(PlotSeries {
                name: format!("{}/{}/cate", self.episode, tr.name),
                points: pts(&tr.cate),
            });
            out.push(PlotSeries {
                name: format!("{}/{}/cumulative", self.episode, tr.name),
                points: pts(&tr.cumulative),
            });
        }
        out
    }
}

fn arm_name(choice: PolicyChoice, vocabulary: &[String]) -> String {
    match choice {
        PolicyChoice::Treatment(z) => vocabulary.get(z).cloned().unwrap_or_else(|| format!("z{z}")),
        PolicyChoice::Observed => "observed".into(),
    }
}

/// Rolls the model forward over `start + 1 ..= start + len` with each
/// candidate held for the whole window, starting with the treatment applied
/// at `start`, and contrasts the outcomes against the reference arm.
#[allow(clippy::too_many_arguments)]
pub fn rank_policies(
    model: &CdaModel,
    episode: &Episode,
    start: usize,
    len: usize,
    candidates: &[PolicyChoice],
    reference: PolicyChoice,
    tag: DomainTag,
    stats: &NormStats,
    vocabulary: &[String],
) -> Result<PolicyRanking, EvalError> {
    if candidates.is_empty() {
        return Err(EvalError::NoCandidates);
    }
    if len == 0 || start + len > episode.len() || start >= episode.len() {
        return Err(EvalError::Window {
            id: episode.id.clone(),
            start,
            end: start + len,
            len: episode.len(),
        });
    }
    let history = episode.slice(0, start + 1);
    let rollout = |choice: PolicyChoice| -> Result<Vec<f64>, EvalError> {
        let zs: Vec<usize> = match choice {
            PolicyChoice::Treatment(z) => vec![z; len],
            PolicyChoice::Observed => episode.z[start..start + len].to_vec(),
        };
        Ok(model.forecast(&history, &zs, tag, XSource::Rollout)?.y_hat)
    };
    let base = rollout(reference)?;
    let mut trajectories = Vec::with_capacity(candidates.len());
    for &c in candidates {
        let y = rollout(c)?;
        let cate: Vec<f64> = y.iter().zip(&base).map(|(a, b)| (a - b) * stats.y_std).collect();
        let mut acc = 0.0;
        let cumulative = cate
            .iter()
            .map(|v| {
                acc += v;
                acc
            })
            .collect();
        trajectories.push(PolicyTrajectory {
            policy: c,
            name: arm_name(c, vocabulary),
            cate,
            cumulative,
        });
    }
    let mut order: Vec<usize> = (0..trajectories.len()).collect();
    order.sort_by(|&a, &b| trajectories[b].increment().total_cmp(&trajectories[a].increment()).then(a.cmp(&b)));
    Ok(PolicyRanking {
        episode: episode.id.clone(),
        window_start: start,
        window_len: len,
        reference,
        trajectories,
        order,
    })
}

pub const RESULTS_FILE: &str = "results.csv";
pub const PER_WELL_FILE: &str = "per_well.csv";
pub const TABLE_FILE: &str = "table.csv";
pub const PLOTS_FILE: &str = "plots.json";

/// Writes `results.csv`, `per_well.csv`, `table.csv` (methods by
/// split/τ/metric, seed means) and `plots.json` into `dir`.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<(), EvalError> {
    if report.rows.is_empty() {
        return Err(EvalError::EmptyResults);
    }
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(RESULTS_FILE))?;
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join(PER_WELL_FILE))?;
    for r in &report.per_well {
        w.serialize(r)?;
    }
    w.flush()?;

    let mut columns: Vec<(String, usize)> = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    for r in &report.rows {
        if !columns.contains(&(r.split.clone(), r.tau)) {
            columns.push((r.split.clone(), r.tau));
        }
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let mut w = csv::Writer::from_path(dir.join(TABLE_FILE))?;
    let mut header = vec!["method".to_string()];
    for (s, t) in &columns {
        for m in ["r2", "rmse", "mae"] {
            header.push(format!("{s}_tau{t}_{m}"));
        }
    }
    w.write_record(&header)?;
    for method in &methods {
        let mut rec = vec![method.clone()];
        for (s, t) in &columns {
            let rows: Vec<&ResultRow> = report
                .rows
                .iter()
                .filter(|r| &r.method == method && &r.split == s && r.tau == *t)
                .collect();
            let mean = |v: Vec<f64>| {
                if v.is_empty() {
                    String::new()
                } else {
                    (v.iter().sum::<f64>() / v.len() as f64).to_string()
                }
            };
            rec.push(mean(rows.iter().filter_map(|r| r.r2).collect()));
            rec.push(mean(rows.iter().map(|r| r.rmse).collect()));
            rec.push(mean(rows.iter().map(|r| r.mae).collect()));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    fs::write(dir.join(PLOTS_FILE), serde_json::to_string_pretty(&report.series)?)?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}
