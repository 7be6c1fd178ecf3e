//! Episodes, domain datasets, CSV ingestion, normalisation and splitting.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_VOCABULARY: [&str; 5] = [
    "none",
    "sand_controlling",
    "perforation_adding",
    "pump_replacing",
    "fracturing",
];

pub fn default_vocabulary() -> Vec<String> {
    DEFAULT_VOCABULARY.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no records")]
    NoRecords,
    #[error("missing column '{0}'")]
    MissingColumn(String),
    #[error("well '{well}' has non-contiguous months ({detail})")]
    NonContiguous { well: String, detail: String },
    #[error("unknown policy '{name}' at line {line}; vocabulary is [{vocabulary}]")]
    UnknownPolicy {
        name: String,
        line: u64,
        vocabulary: String,
    },
    #[error("line {line}: cannot parse {column} value '{value}'")]
    Parse { line: u64, column: String, value: String },
    #[error("well '{0}' has static features that vary between rows")]
    StaticMismatch(String),
    #[error("episode '{id}': {detail}")]
    Episode { id: String, detail: String },
    #[error("split: {0}")]
    Split(String),
    #[error("normalisation stats cover {expected} covariate channels, dataset has {found}")]
    StatsMismatch { expected: usize, found: usize },
    #[error("datasets are incompatible: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Exogenous noise drawn while simulating, kept for counterfactual replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseTrace {
    /// `eps[t]` is the covariate noise entering `x[t + 1]`.
    pub eps: Vec<Vec<f64>>,
    /// `eta[t]` is the outcome noise of `y[t]`.
    pub eta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub start_month: i64,
    pub x: Vec<Vec<f64>>,
    pub z: Vec<usize>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseTrace>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn d_x(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn months(&self) -> impl Iterator<Item = i64> + '_ {
        (0..self.len() as i64).map(move |t| self.start_month + t)
    }

    /// Contiguous sub-episode `start..start + len`. The noise trace is dropped.
    pub fn slice(&self, start: usize, len: usize) -> Episode {
        Episode {
            id: self.id.clone(),
            start_month: self.start_month + start as i64,
            x: self.x[start..start + len].to_vec(),
            z: self.z[start..start + len].to_vec(),
            y: self.y[start..start + len].to_vec(),
            u: self.u.clone(),
            noise: None,
        }
    }

    pub fn ever_receives(&self, z: usize) -> bool {
        self.z.contains(&z)
    }

    pub fn validate(&self, d_x: usize, k: usize, u_dim: usize) -> Result<(), DataError> {
        let bad = |detail: String| DataError::Episode {
            id: self.id.clone(),
            detail,
        };
        let t = self.len();
        if t < 2 {
            return Err(bad(format!("length {t} is below the minimum of 2")));
        }
        if self.x.len() != t || self.z.len() != t {
            return Err(bad(format!(
                "X, Z, Y lengths differ ({}, {}, {t})",
                self.x.len(),
                self.z.len()
            )));
        }
        if let Some(row) = self.x.iter().position(|r| r.len() != d_x) {
            return Err(bad(format!("row {row} has {} covariates, expected {d_x}", self.x[row].len())));
        }
        if let Some(&z) = self.z.iter().find(|&&z| z >= k) {
            return Err(bad(format!("treatment {z} outside 0..{k}")));
        }
        if self.u.len() != u_dim {
            return Err(bad(format!("{} static features, expected {u_dim}", self.u.len())));
        }
        let finite = self.y.iter().chain(self.x.iter().flatten()).chain(&self.u).all(|v| v.is_finite());
        if !finite {
            return Err(bad("non-finite value".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        }
    }
}

impl std::str::FromStr for DomainTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "source" => Ok(DomainTag::Source),
            "target" => Ok(DomainTag::Target),
            other => Err(format!("unknown domain tag '{other}' (expected source or target)")),
        }
    }
}

/// Per-channel z-score statistics. Constant channels carry `mean = 0`,
/// `std = 1` so that they pass through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub x_constant: Vec<bool>,
    pub y_mean: f64,
    pub y_std: f64,
    pub y_constant: bool,
}

const MIN_STD: f64 = 1e-12;

fn moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl NormStats {
    pub fn compute(episodes: &[Episode]) -> Result<Self, DataError> {
        let first = episodes.first().ok_or(DataError::NoRecords)?;
        let d_x = first.d_x();
        let mut x_mean = Vec::with_capacity(d_x);
        let mut x_std = Vec::with_capacity(d_x);
        let mut x_constant = Vec::with_capacity(d_x);
        for j in 0..d_x {
            let (m, s) = moments(episodes.iter().flat_map(|e| e.x.iter().map(move |r| r[j])));
            if s < MIN_STD {
                x_mean.push(0.0);
                x_std.push(1.0);
                x_constant.push(true);
            } else {
                x_mean.push(m);
                x_std.push(s);
                x_constant.push(false);
            }
        }
        let (ym, ys) = moments(episodes.iter().flat_map(|e| e.y.iter().copied()));
        let y_constant = ys < MIN_STD;
        Ok(Self {
            x_mean,
            x_std,
            x_constant,
            y_mean: if y_constant { 0.0 } else { ym },
            y_std: if y_constant { 1.0 } else { ys },
            y_constant,
        })
    }

    pub fn identity(d_x: usize) -> Self {
        Self {
            x_mean: vec![0.0; d_x],
            x_std: vec![1.0; d_x],
            x_constant: vec![false; d_x],
            y_mean: 0.0,
            y_std: 1.0,
            y_constant: false,
        }
    }

    pub fn y_to_raw(&self, y: f64) -> f64 {
        y * self.y_std + self.y_mean
    }

    pub fn y_to_norm(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_std
    }

    /// Converts a normalised covariate difference back to raw units.
    pub fn x_delta_to_raw(&self, delta: &[f64]) -> Vec<f64> {
        delta.iter().zip(&self.x_std).map(|(d, s)| d * s).collect()
    }

    pub fn apply(&self, e: &Episode) -> Episode {
        let mut out = e.clone();
        for row in &mut out.x {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.x_mean[j]) / self.x_std[j];
            }
        }
        for v in &mut out.y {
            *v = self.y_to_norm(*v);
        }
        out
    }

    pub fn invert(&self, e: &Episode) -> Episode {
        let mut out = e.clone();
        for row in &mut out.x {
            for (j, v) in row.iter_mut().enumerate() {
                *v = *v * self.x_std[j] + self.x_mean[j];
            }
        }
        for v in &mut out.y {
            *v = self.y_to_raw(*v);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub tag: DomainTag,
    pub episodes: Vec<Episode>,
    /// Statistics the episodes were normalised with, if any.
    pub norm: Option<NormStats>,
    pub vocabulary: Vec<String>,
    pub d_x: usize,
    pub u_dim: usize,
}

impl DomainDataset {
    pub fn new(tag: DomainTag, episodes: Vec<Episode>, vocabulary: Vec<String>) -> Result<Self, DataError> {
        let first = episodes.first().ok_or(DataError::NoRecords)?;
        let (d_x, u_dim) = (first.d_x(), first.u.len());
        let k = vocabulary.len();
        for e in &episodes {
            e.validate(d_x, k, u_dim)?;
        }
        Ok(Self {
            tag,
            episodes,
            norm: None,
            vocabulary,
            d_x,
            u_dim,
        })
    }

    /// Same schema, no episodes. Used for empty partitions.
    pub fn empty_like(&self) -> Self {
        Self {
            tag: self.tag,
            episodes: Vec::new(),
            norm: self.norm.clone(),
            vocabulary: self.vocabulary.clone(),
            d_x: self.d_x,
            u_dim: self.u_dim,
        }
    }

    pub fn with_episodes(&self, episodes: Vec<Episode>) -> Self {
        Self {
            episodes,
            ..self.empty_like()
        }
    }

    pub fn k(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn records(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn with_tag(mut self, tag: DomainTag) -> Self {
        self.tag = tag;
        self
    }

    pub fn episode(&self, id: &str) -> Option<&Episode> {
        self.episodes.iter().find(|e| e.id == id)
    }

    pub fn check_compatible(&self, other: &DomainDataset) -> Result<(), DataError> {
        if self.d_x != other.d_x || self.u_dim != other.u_dim || self.vocabulary != other.vocabulary {
            return Err(DataError::Incompatible(format!(
                "d_x {} vs {}, u_dim {} vs {}, vocabulary {:?} vs {:?}",
                self.d_x, other.d_x, self.u_dim, other.u_dim, self.vocabulary, other.vocabulary
            )));
        }
        Ok(())
    }

    /// Empirical frequency of each treatment over all timesteps.
    pub fn treatment_rates(&self) -> Vec<f64> {
        let mut counts = vec![0usize; self.k()];
        for e in &self.episodes {
            for &z in &e.z {
                counts[z] += 1;
            }
        }
        let n = self.records().max(1) as f64;
        counts.into_iter().map(|c| c as f64 / n).collect()
    }

    /// Removes simulator noise traces.
    pub fn without_noise(mut self) -> Self {
        for e in &mut self.episodes {
            e.noise = None;
        }
        self
    }
}

/// Z-scores covariates and outcomes. With `stats = None` the statistics are
/// computed from `dataset` itself, which should be the training portion.
pub fn normalize(dataset: &DomainDataset, stats: Option<&NormStats>) -> Result<(DomainDataset, NormStats), DataError> {
    let stats = match stats {
        Some(s) => {
            if s.x_mean.len() != dataset.d_x {
                return Err(DataError::StatsMismatch {
                    expected: s.x_mean.len(),
                    found: dataset.d_x,
                });
            }
            s.clone()
        }
        None => NormStats::compute(&dataset.episodes)?,
    };
    let mut out = dataset.with_episodes(dataset.episodes.iter().map(|e| stats.apply(e)).collect());
    out.norm = Some(stats.clone());
    Ok((out, stats))
}

pub fn denormalize(dataset: &DomainDataset, stats: &NormStats) -> DomainDataset {
    let mut out = dataset.with_episodes(dataset.episodes.iter().map(|e| stats.invert(e)).collect());
    out.norm = None;
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitMode {
    InsideWell { tau: usize },
    CrossWell { train_fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub seed: u64,
}

impl SplitPlan {
    pub fn inside_well(tau: usize) -> Self {
        Self {
            mode: SplitMode::InsideWell { tau },
            seed: 0,
        }
    }

    pub fn cross_well(train_fraction: f64, seed: u64) -> Self {
        Self {
            mode: SplitMode::CrossWell { train_fraction },
            seed,
        }
    }
}

/// Partitions a dataset into train and eval parts. Inside-well splits keep
/// every well on both sides (prefix / suffix); cross-well splits assign whole
/// wells.
pub fn split(dataset: &DomainDataset, plan: &SplitPlan) -> Result<(DomainDataset, DomainDataset), DataError> {
    match plan.mode {
        SplitMode::InsideWell { tau } => {
            if tau == 0 {
                return Err(DataError::Split("tau must be at least 1".into()));
            }
            let mut train = Vec::with_capacity(dataset.len());
            let mut eval = Vec::with_capacity(dataset.len());
            for e in &dataset.episodes {
                if tau >= e.len() {
                    return Err(DataError::Split(format!(
                        "tau {tau} is not shorter than episode '{}' (length {})",
                        e.id,
                        e.len()
                    )));
                }
                let cut = e.len() - tau;
                train.push(e.slice(0, cut));
                eval.push(e.slice(cut, tau));
            }
            Ok((dataset.with_episodes(train), dataset.with_episodes(eval)))
        }
        SplitMode::CrossWell { train_fraction } => {
            if !(train_fraction > 0.0 && train_fraction < 1.0) {
                return Err(DataError::Split(format!("train fraction {train_fraction} outside (0, 1)")));
            }
            let n = dataset.len();
            if n < 2 {
                return Err(DataError::Split(format!("cross-well split needs at least 2 wells, found {n}")));
            }
            let n_train = ((train_fraction * n as f64).floor() as usize).clamp(1, n - 1);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(plan.seed));
            let chosen: BTreeSet<usize> = order[..n_train].iter().copied().collect();
            let (mut train, mut eval) = (Vec::new(), Vec::new());
            for (i, e) in dataset.episodes.iter().enumerate() {
                if chosen.contains(&i) {
                    train.push(e.clone());
                } else {
                    eval.push(e.clone());
                }
            }
            Ok((dataset.with_episodes(train), dataset.with_episodes(eval)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionCount {
    pub wells: usize,
    pub records: usize,
}

/// Episodes grouped by every non-reference policy they ever receive. A well
/// that receives several policies appears in several partitions.
pub fn policy_partition(dataset: &DomainDataset) -> IndexMap<String, DomainDataset> {
    dataset
        .vocabulary
        .iter()
        .enumerate()
        .skip(1)
        .map(|(z, name)| {
            let eps = dataset.episodes.iter().filter(|e| e.ever_receives(z)).cloned().collect();
            (name.clone(), dataset.with_episodes(eps))
        })
        .collect()
}

pub fn partition_counts(parts: &IndexMap<String, DomainDataset>) -> IndexMap<String, PartitionCount> {
    parts
        .iter()
        .map(|(k, d)| {
            (
                k.clone(),
                PartitionCount {
                    wells: d.len(),
                    records: d.records(),
                },
            )
        })
        .collect()
}

struct Columns {
    well: usize,
    month: usize,
    x: Vec<usize>,
    z: usize,
    y: usize,
    u: Vec<usize>,
}

fn numbered(header: &csv::StringRecord, prefix: &str) -> Result<Vec<usize>, DataError> {
    let mut found: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, h) in header.iter().enumerate() {
        if let Some(rest) = h.trim().strip_prefix(prefix) {
            if let Ok(n) = rest.parse::<usize>() {
                found.insert(n, i);
            }
        }
    }
    let max = found.keys().next_back().copied().unwrap_or(0);
    (1..=max)
        .map(|n| {
            found
                .get(&n)
                .copied()
                .ok_or_else(|| DataError::MissingColumn(format!("{prefix}{n}")))
        })
        .collect()
}

fn locate(header: &csv::StringRecord) -> Result<Columns, DataError> {
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let x = numbered(header, "X")?;
    if x.is_empty() {
        return Err(DataError::MissingColumn("X1".into()));
    }
    Ok(Columns {
        well: find("well_id")?,
        month: find("month")?,
        x,
        z: find("Z")?,
        y: find("Y")?,
        u: numbered(header, "U")?,
    })
}

fn parse_f64(rec: &csv::StringRecord, idx: usize, line: u64, column: &str) -> Result<f64, DataError> {
    let raw = rec.get(idx).unwrap_or("").trim();
    raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| DataError::Parse {
        line,
        column: column.to_string(),
        value: raw.to_string(),
    })
}

/// Reads the well/month CSV layout into one episode per well.
pub fn read_csv<R: Read>(reader: R, tag: DomainTag, vocabulary: &[String]) -> Result<DomainDataset, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.is_empty() {
        return Err(DataError::NoRecords);
    }
    let cols = locate(&header)?;
    let policy_index: IndexMap<&str, usize> = vocabulary.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();

    struct Row {
        month: i64,
        x: Vec<f64>,
        z: usize,
        y: f64,
        u: Vec<f64>,
    }
    let mut wells: IndexMap<String, Vec<Row>> = IndexMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let well = rec.get(cols.well).unwrap_or("").trim().to_string();
        let month_raw = rec.get(cols.month).unwrap_or("").trim();
        let month = month_raw.parse::<i64>().map_err(|_| DataError::Parse {
            line,
            column: "month".into(),
            value: month_raw.to_string(),
        })?;
        let x = cols
            .x
            .iter()
            .enumerate()
            .map(|(j, &c)| parse_f64(&rec, c, line, &format!("X{}", j + 1)))
            .collect::<Result<Vec<_>, _>>()?;
        let u = cols
            .u
            .iter()
            .enumerate()
            .map(|(j, &c)| parse_f64(&rec, c, line, &format!("U{}", j + 1)))
            .collect::<Result<Vec<_>, _>>()?;
        let zname = rec.get(cols.z).unwrap_or("").trim();
        let z = *policy_index.get(zname).ok_or_else(|| DataError::UnknownPolicy {
            name: zname.to_string(),
            line,
            vocabulary: vocabulary.join(", "),
        })?;
        let y = parse_f64(&rec, cols.y, line, "Y")?;
        wells.entry(well).or_default().push(Row { month, x, z, y, u });
    }
    if wells.is_empty() {
        return Err(DataError::NoRecords);
    }
    let mut episodes = Vec::with_capacity(wells.len());
    for (id, mut rows) in wells {
        rows.sort_by_key(|r| r.month);
        for w in rows.windows(2) {
            if w[1].month != w[0].month + 1 {
                return Err(DataError::NonContiguous {
                    well: id,
                    detail: format!("month {} followed by {}", w[0].month, w[1].month),
                });
            }
            if w[1].u != w[0].u {
                return Err(DataError::StaticMismatch(id));
            }
        }
        let start_month = rows[0].month;
        let u = rows[0].u.clone();
        let mut e = Episode {
            id,
            start_month,
            x: Vec::with_capacity(rows.len()),
            z: Vec::with_capacity(rows.len()),
            y: Vec::with_capacity(rows.len()),
            u,
            noise: None,
        };
        for r in rows {
            e.x.push(r.x);
            e.z.push(r.z);
            e.y.push(r.y);
        }
        episodes.push(e);
    }
    DomainDataset::new(tag, episodes, vocabulary.to_vec())
}

pub fn ingest_csv(path: &Path, tag: DomainTag, vocabulary: &[String]) -> Result<DomainDataset, DataError> {
    read_csv(File::open(path)?, tag, vocabulary)
}

/// Writes the dataset in the same layout `read_csv` accepts. Floats use the
/// shortest representation that parses back to the identical value.
pub fn write_csv<W: Write>(dataset: &DomainDataset, writer: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["well_id".to_string(), "month".to_string()];
    header.extend((1..=dataset.d_x).map(|j| format!("X{j}")));
    header.push("Z".into());
    header.push("Y".into());
    header.extend((1..=dataset.u_dim).map(|j| format!("U{j}")));
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for e in &dataset.episodes {
        for t in 0..e.len() {
            row.clear();
            row.push(e.id.clone());
            row.push((e.start_month + t as i64).to_string());
            row.extend(e.x[t].iter().map(|v| v.to_string()));
            row.push(dataset.vocabulary[e.z[t]].clone());
            row.push(e.y[t].to_string());
            row.extend(e.u.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(dataset: &DomainDataset, path: &Path) -> Result<(), DataError> {
    write_csv(dataset, File::create(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tag: DomainTag,
    pub covariates: Vec<String>,
    pub outcome: String,
    pub statics: Vec<String>,
    pub units: IndexMap<String, String>,
    pub policies: Vec<String>,
    pub episodes: usize,
    pub records: usize,
    pub normalized: bool,
}

impl Manifest {
    pub fn describe(dataset: &DomainDataset) -> Self {
        let covariates: Vec<String> = (1..=dataset.d_x).map(|j| format!("X{j}")).collect();
        let statics: Vec<String> = (1..=dataset.u_dim).map(|j| format!("U{j}")).collect();
        let unit = if dataset.norm.is_some() { "z-score" } else { "raw" };
        let units = covariates
            .iter()
            .chain(std::iter::once(&"Y".to_string()))
            .map(|c| (c.clone(), unit.to_string()))
            .chain(statics.iter().map(|c| (c.clone(), "raw".to_string())))
            .collect();
        Self {
            tag: dataset.tag,
            covariates,
            outcome: "Y".into(),
            statics,
            units,
            policies: dataset.vocabulary.clone(),
            episodes: dataset.len(),
            records: dataset.records(),
            normalized: dataset.norm.is_some(),
        }
    }
}

pub fn write_manifest(dataset: &DomainDataset, path: &Path) -> Result<(), DataError> {
    let f = File::create(path)?;
    serde_json::to_writer_pretty(f, &Manifest::describe(dataset))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vec<String> {
        default_vocabulary()
    }

    const TOY: &str = "well_id,month,X1,X2,Z,Y,U1\n\
        a,0,0.1,1e-3,none,1.5,7\n\
        a,2,0.3,-2,fracturing,3.25,7\n\
        a,1,0.2,0.5,sand_controlling,2,7\n\
        b,5,1,2,none,0.1,-1\n\
        b,6,1.1,2.2,none,0.2,-1\n\
        b,7,1.3,2.1,pump_replacing,0.30000000000000004,-1\n";

    #[test]
    fn toy_ingest_groups_and_sorts() {
        let d = read_csv(TOY.as_bytes(), DomainTag::Source, &vocab()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.records(), 6);
        let a = &d.episodes[0];
        assert_eq!(a.id, "a");
        assert_eq!(a.z, vec![0, 1, 4]);
        assert_eq!(a.y, vec![1.5, 2.0, 3.25]);
        assert_eq!(d.episodes[1].start_month, 5);
        assert_eq!(d.episodes[1].y[2], 0.30000000000000004);
    }

    #[test]
    fn empty_file_has_no_records() {
        let err = read_csv("well_id,month,X1,Z,Y\n".as_bytes(), DomainTag::Source, &vocab()).unwrap_err();
        assert_eq!(err.to_string(), "no records");
        let err = read_csv("".as_bytes(), DomainTag::Source, &vocab()).unwrap_err();
        assert_eq!(err.to_string(), "no records");
    }

    #[test]
    fn missing_column_is_named() {
        let err = read_csv("well_id,month,X1,Z\na,0,1,none\n".as_bytes(), DomainTag::Source, &vocab()).unwrap_err();
        assert!(err.to_string().contains("'Y'"), "{err}");
        let err = read_csv("well_id,month,X1,X3,Z,Y\n".as_bytes(), DomainTag::Source, &vocab()).unwrap_err();
        assert!(err.to_string().contains("'X2'"), "{err}");
    }

    #[test]
    fn gaps_are_rejected_with_the_well() {
        let csv = "well_id,month,X1,Z,Y\nw9,0,1,none,1\nw9,2,1,none,1\n";
        let err = read_csv(csv.as_bytes(), DomainTag::Source, &vocab()).unwrap_err();
        assert!(err.to_string().contains("w9"), "{err}");
    }

    #[test]
    fn unknown_policy_lists_vocabulary() {
        let csv = "well_id,month,X1,Z,Y\nw,0,1,sucker_rod_pump,1\nw,1,1,none,1\n";
        let err = read_csv(csv.as_bytes(), DomainTag::Source, &vocab()).unwrap_err().to_string();
        assert!(err.contains("sucker_rod_pump") && err.contains("perforation_adding"), "{err}");
    }

    #[test]
    fn write_then_read_is_exact() {
        let d = read_csv(TOY.as_bytes(), DomainTag::Source, &vocab()).unwrap();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), DomainTag::Source, &vocab()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn normalize_round_trip() {
        let d = read_csv(TOY.as_bytes(), DomainTag::Source, &vocab()).unwrap();
        let (n, stats) = normalize(&d, None).unwrap();
        let back = denormalize(&n, &stats);
        for (a, b) in back.episodes.iter().zip(&d.episodes) {
            for (ra, rb) in a.x.iter().zip(&b.x) {
                for (va, vb) in ra.iter().zip(rb) {
                    assert!((va - vb).abs() < 1e-12);
                }
            }
            for (va, vb) in a.y.iter().zip(&b.y) {
                assert!((va - vb).abs() < 1e-12);
            }
            assert_eq!(a.u, b.u);
            assert_eq!(a.z, b.z);
        }
    }

    #[test]
    fn constant_channel_is_flagged() {
        let csv = "well_id,month,X1,X2,Z,Y\nw,0,5,1,none,1\nw,1,5,2,none,2\n";
        let d = read_csv(csv.as_bytes(), DomainTag::Source, &vocab()).unwrap();
        let (n, stats) = normalize(&d, None).unwrap();
        assert!(stats.x_constant[0] && !stats.x_constant[1]);
        assert_eq!(n.episodes[0].x[0][0], 5.0);
    }

    #[test]
    fn inside_well_split_lengths() {
        let d = read_csv(TOY.as_bytes(), DomainTag::Source, &vocab()).unwrap();
        let (train, eval) = split(&d, &SplitPlan::inside_well(1)).unwrap();
        assert_eq!(train.episodes[0].len(), 2);
        assert_eq!(eval.episodes[0].len(), 1);
        assert_eq!(eval.episodes[0].start_month, 2);
        assert!(split(&d, &SplitPlan::inside_well(3)).unwrap_err().to_string().contains("'a'"));
    }

    #[test]
    fn cross_well_half_of_two() {
        let d = read_csv(TOY.as_bytes(), DomainTag::Source, &vocab()).unwrap();
        let (train, eval) = split(&d, &SplitPlan::cross_well(0.5, 3)).unwrap();
        assert_eq!((train.len(), eval.len()), (1, 1));
        assert_ne!(train.episodes[0].id, eval.episodes[0].id);
    }

    #[test]
    fn partitions_without_treatment_are_empty() {
        let csv = "well_id,month,X1,Z,Y\nw,0,5,none,1\nw,1,5,none,2\n";
        let d = read_csv(csv.as_bytes(), DomainTag::Source, &vocab()).unwrap();
        let parts = policy_partition(&d);
        assert_eq!(parts.len(), 4);
        assert!(parts.values().all(DomainDataset::is_empty));
    }
}
