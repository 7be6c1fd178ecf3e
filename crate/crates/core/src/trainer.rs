//! Adversarial training loop over a source and a target domain.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{self, CheckpointError};
use crate::dataset::{DomainDataset, DomainTag, Episode};
use crate::model::{is_discriminator_param, BatchInput, CdaModel, Feed, ModelError};
use crate::objectives::{
    domain_bce_graph, domain_loss_graph, seq_loss_graph, total_objective, DomainSide, DomainWeights, LossBreakdown,
    ObjectiveError, ObjectiveView,
};
use crate::optim::{OptimError, Sgd};
use crate::tensor::{Tensor, TensorError};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CHECKPOINT_FILE: &str = "state.ckpt";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} domain is empty")]
    EmptyDomain(&'static str),
    #[error("training diverged at step {step}{}", checkpoint.as_ref().map(|p| format!("; last good state kept at {}", p.display())).unwrap_or_default())]
    Diverged { step: usize, checkpoint: Option<PathBuf> },
    #[error("state was built for {expected} source / {expected_t} target episodes, got {found} / {found_t}")]
    DataMismatch {
        expected: usize,
        expected_t: usize,
        found: usize,
        found_t: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training log: {0}")]
    Io(#[from] std::io::Error),
    #[error("training log: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::from(e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainMode {
    Cmmd,
    Discriminator,
    Both,
}

impl DomainMode {
    fn uses_cmmd(self) -> bool {
        matches!(self, DomainMode::Cmmd | DomainMode::Both)
    }

    fn uses_discriminator(self) -> bool {
        matches!(self, DomainMode::Discriminator | DomainMode::Both)
    }
}

/// Sign with which the domain loss enters the generator's descent objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainSign {
    Plus,
    Minus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Episodes per domain per step.
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub momentum: f64,
    pub lambda: f64,
    /// Fraction of the planned steps over which λ ramps linearly from 0.
    pub warmup_fraction: f64,
    pub domain_weights: DomainWeights,
    pub domain_mode: DomainMode,
    pub domain_sign: DomainSign,
    /// Trailing positions of each episode scored as the forecast horizon.
    pub horizon: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Weight of the covariate (treatment term) regression loss.
    pub aux_weight: f64,
    /// Domain terms are logged but never enter the differentiated objective.
    pub detach_domain: bool,
    pub freeze_generator: bool,
    pub freeze_discriminator: bool,
    pub max_steps: Option<usize>,
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr_generator: 0.01,
            lr_discriminator: 0.01,
            momentum: 0.9,
            lambda: 1.0,
            warmup_fraction: 0.1,
            domain_weights: DomainWeights::default(),
            domain_mode: DomainMode::Cmmd,
            domain_sign: DomainSign::Plus,
            horizon: 0,
            seed: 0,
            clip_norm: Some(5.0),
            aux_weight: 1.0,
            detach_domain: false,
            freeze_generator: false,
            freeze_discriminator: false,
            max_steps: None,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, lr) in [("lr_generator", self.lr_generator), ("lr_discriminator", self.lr_discriminator)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction must lie in [0, 1], got {}", self.warmup_fraction));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.domain_weights.beta.iter().any(|b| *b < 0.0) || self.domain_weights.gamma < 0.0 {
            return bad("domain weights must be non-negative".into());
        }
        if !(self.aux_weight >= 0.0) {
            return bad(format!("aux_weight must be non-negative, got {}", self.aux_weight));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint_every must be at least 1".into());
        }
        Ok(())
    }
}

/// Position in the deterministic batch schedule. Permutations are derived
/// from `(seed, counter)`, so these counters are the whole random state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub epoch: usize,
    pub target_pos: usize,
    pub source_cycle: usize,
    pub source_pos: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lambda_eff: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm_generator: f64,
    pub grad_norm_discriminator: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: CdaModel,
    pub step: usize,
    pub cursor: Cursor,
    pub opt_generator: Sgd,
    pub opt_discriminator: Sgd,
    pub n_source: usize,
    pub n_target: usize,
    pub history: Vec<StepRecord>,
}

impl TrainState {
    pub fn new(
        config: TrainConfig,
        model: CdaModel,
        source: &DomainDataset,
        target: &DomainDataset,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if source.is_empty() {
            return Err(TrainError::EmptyDomain("source"));
        }
        if target.is_empty() {
            return Err(TrainError::EmptyDomain("target"));
        }
        let opt_generator = Sgd::new(config.lr_generator, config.momentum, config.clip_norm)?;
        let opt_discriminator = Sgd::new(config.lr_discriminator, config.momentum, config.clip_norm)?;
        Ok(Self {
            config,
            model,
            step: 0,
            cursor: Cursor::default(),
            opt_generator,
            opt_discriminator,
            n_source: source.len(),
            n_target: target.len(),
            history: Vec::new(),
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.n_target.div_ceil(self.config.batch_size)
    }

    pub fn planned_steps(&self) -> usize {
        let full = self.config.epochs * self.steps_per_epoch();
        self.config.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.planned_steps()
    }

    pub fn lambda_at(&self, step: usize) -> f64 {
        let warm = (self.config.warmup_fraction * self.planned_steps() as f64).ceil() as usize;
        if warm == 0 {
            self.config.lambda
        } else {
            self.config.lambda * ((step + 1) as f64 / warm as f64).min(1.0)
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(checkpoint::save(self, path)?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Ok(checkpoint::load(path)?)
    }

    fn check_data(&self, source: &DomainDataset, target: &DomainDataset) -> Result<(), TrainError> {
        if source.is_empty() {
            return Err(TrainError::EmptyDomain("source"));
        }
        if target.is_empty() {
            return Err(TrainError::EmptyDomain("target"));
        }
        if source.len() != self.n_source || target.len() != self.n_target {
            return Err(TrainError::DataMismatch {
                expected: self.n_source,
                expected_t: self.n_target,
                found: source.len(),
                found_t: target.len(),
            });
        }
        Ok(())
    }
}

fn permutation(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

const TARGET_STREAM: u64 = 1 << 40;
const SOURCE_STREAM: u64 = 2 << 40;

/// Episode indices for the batch at `cursor`, and the cursor after it.
pub fn schedule(
    cursor: Cursor,
    n_source: usize,
    n_target: usize,
    batch: usize,
    seed: u64,
) -> (Vec<usize>, Vec<usize>, Cursor) {
    let mut next = cursor;
    let tp = permutation(n_target, seed, TARGET_STREAM + cursor.epoch as u64);
    let end = (cursor.target_pos + batch).min(n_target);
    let target = tp[cursor.target_pos..end].to_vec();
    next.target_pos = end;
    if end >= n_target {
        next.epoch += 1;
        next.target_pos = 0;
    }
    let want = batch.min(n_source);
    let mut source = Vec::with_capacity(want);
    let mut sp = permutation(n_source, seed, SOURCE_STREAM + next.source_cycle as u64);
    while source.len() < want {
        if next.source_pos >= n_source {
            next.source_cycle += 1;
            next.source_pos = 0;
            sp = permutation(n_source, seed, SOURCE_STREAM + next.source_cycle as u64);
        }
        source.push(sp[next.source_pos]);
        next.source_pos += 1;
    }
    (source, target, next)
}

struct DomainPass {
    seq: Var,
    aux: Var,
    x: Tensor,
    r: Var,
    pooled: Var,
}

/// Forward pass over one domain's batch, grouped by episode length.
fn domain_pass(
    model: &CdaModel,
    g: &mut Graph,
    episodes: &[&Episode],
    tag: DomainTag,
    horizon: usize,
) -> Result<DomainPass, TrainError> {
    let mut groups: BTreeMap<usize, Vec<&Episode>> = BTreeMap::new();
    for e in episodes {
        groups.entry(e.len()).or_default().push(e);
    }
    let d_x = model.dims.d_x;
    let mut seq_terms = Vec::new();
    let mut aux_terms = Vec::new();
    let mut aux_count = 0usize;
    let mut x_rows: Vec<f64> = Vec::new();
    let mut r_vars = Vec::new();
    let mut pooled = Vec::new();
    for (len, group) in &groups {
        let input = BatchInput::from_episodes(group)?;
        let tr = model.run(g, &input, tag, Feed::teacher_forced())?;
        let mut residuals = Vec::with_capacity(len - 1);
        for (i, &yh) in tr.y_hat.iter().enumerate() {
            let y = g.constant(input.y[i + 1].clone());
            residuals.push(g.sub(yh, y)?);
        }
        let hist = (len - 1).saturating_sub(horizon);
        seq_terms.push(seq_loss_graph(g, &residuals, hist)?);
        for (i, &mu) in tr.mu.iter().enumerate() {
            let x = g.constant(input.x[i + 1].clone());
            let d = g.sub(mu, x)?;
            aux_terms.push(g.sq_norm(d)?);
        }
        aux_count += group.len() * (len - 1) * d_x;
        for (t, &r) in tr.r.iter().enumerate() {
            x_rows.extend_from_slice(input.x[t].data());
            r_vars.push(r);
        }
        pooled.push(tr.pooled);
    }
    let sum = |g: &mut Graph, v: &[Var]| -> Result<Var, TensorError> {
        let mut acc = v[0];
        for &t in &v[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(acc)
    };
    let seq = sum(g, &seq_terms)?;
    let seq = g.scale(seq, 1.0 / episodes.len() as f64)?;
    let aux = sum(g, &aux_terms)?;
    let aux = g.scale(aux, 1.0 / aux_count as f64)?;
    let n_rows = x_rows.len() / d_x;
    let x = Tensor::new(vec![n_rows, d_x], x_rows)?;
    let r = g.concat_rows(&r_vars)?;
    let pooled = g.concat_rows(&pooled)?;
    Ok(DomainPass { seq, aux, x, r, pooled })
}

/// The differentiated training objective for one pair of batches, built on
/// `g`. Returns the root to descend on and the logged breakdown.
pub fn objective(
    g: &mut Graph,
    model: &CdaModel,
    cfg: &TrainConfig,
    lambda_eff: f64,
    src: &[&Episode],
    tgt: &[&Episode],
) -> Result<(Var, LossBreakdown), TrainError> {
    let ps = domain_pass(model, g, src, DomainTag::Source, cfg.horizon)?;
    let pt = domain_pass(model, g, tgt, DomainTag::Target, cfg.horizon)?;

    let mask_s = vec![true; ps.x.rows()];
    let mask_t = vec![true; pt.x.rows()];
    let (rs, rt) = if cfg.detach_domain {
        (g.detach(ps.r), g.detach(pt.r))
    } else {
        (ps.r, pt.r)
    };
    let dom = domain_loss_graph(
        g,
        DomainSide { x: &ps.x, r: rs, labelled: &mask_s },
        DomainSide { x: &pt.x, r: rt, labelled: &mask_t },
        &cfg.domain_weights,
    )?;

    let mut root = g.add(ps.seq, pt.seq)?;
    if cfg.aux_weight > 0.0 {
        let a = g.add(ps.aux, pt.aux)?;
        let a = g.scale(a, cfg.aux_weight)?;
        root = g.add(root, a)?;
    }
    if cfg.domain_mode.uses_cmmd() && !cfg.detach_domain {
        let sign = match cfg.domain_sign {
            DomainSign::Plus => 1.0,
            DomainSign::Minus => -1.0,
        };
        let d = g.scale(dom.total, sign * lambda_eff)?;
        root = g.add(root, d)?;
    }
    let mut l_disc = None;
    if cfg.domain_mode.uses_discriminator() {
        let (pool_s, pool_t) = if cfg.detach_domain {
            (g.detach(ps.pooled), g.detach(pt.pooled))
        } else {
            (g.grad_reverse(ps.pooled, 1.0)?, g.grad_reverse(pt.pooled, 1.0)?)
        };
        let ls = model.disc_logit(g, pool_s)?;
        let lt = model.disc_logit(g, pool_t)?;
        let bce = domain_bce_graph(g, ls, lt)?;
        l_disc = Some(g.scalar(bce));
        if !cfg.detach_domain {
            let d = g.scale(bce, lambda_eff)?;
            root = g.add(root, d)?;
        }
    }

    let mut breakdown = LossBreakdown {
        l_seq_source: g.scalar(ps.seq),
        l_seq_target: g.scalar(pt.seq),
        l_aux: g.scalar(ps.aux) + g.scalar(pt.aux),
        l1: g.scalar(dom.l1),
        l2: g.scalar(dom.l2),
        l3: g.scalar(dom.l3),
        l4: g.scalar(dom.l4),
        cross_term: g.scalar(dom.cross),
        l_dom: g.scalar(dom.total),
        l_disc,
        total: 0.0,
    };
    breakdown.total = total_objective(&breakdown, lambda_eff, ObjectiveView::Generator)?;
    Ok((root, breakdown))
}

struct StepGraph {
    graph: Graph,
    root: Var,
    breakdown: LossBreakdown,
    lambda_eff: f64,
}

fn build_step(
    state: &TrainState,
    source: &DomainDataset,
    target: &DomainDataset,
    src_idx: &[usize],
    tgt_idx: &[usize],
) -> Result<StepGraph, TrainError> {
    let lambda_eff = state.lambda_at(state.step);
    let mut g = Graph::new();
    let src: Vec<&Episode> = src_idx.iter().map(|&i| &source.episodes[i]).collect();
    let tgt: Vec<&Episode> = tgt_idx.iter().map(|&i| &target.episodes[i]).collect();
    let (root, breakdown) = objective(&mut g, &state.model, &state.config, lambda_eff, &src, &tgt)?;
    Ok(StepGraph {
        graph: g,
        root,
        breakdown,
        lambda_eff,
    })
}

/// Loss breakdown of the batch the next step would train on, at the
/// current parameters. Matches the logged record for that step exactly.
pub fn step_loss(state: &TrainState, source: &DomainDataset, target: &DomainDataset) -> Result<LossBreakdown, TrainError> {
    state.check_data(source, target)?;
    let (s, t, _) = schedule(state.cursor, state.n_source, state.n_target, state.config.batch_size, state.config.seed);
    Ok(build_step(state, source, target, &s, &t)?.breakdown)
}

/// Optional artefacts of a training run.
#[derive(Debug, Clone, Default)]
pub struct RunFiles {
    pub dir: Option<PathBuf>,
}

impl RunFiles {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(CHECKPOINT_FILE))
    }
}

/// Episode ids read during training, prefixed by domain.
pub type AccessLog = Vec<String>;

fn is_nonfinite(e: &TrainError) -> bool {
    matches!(
        e,
        TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. })) | TrainError::Optim(OptimError::NonFiniteGradient(_))
    )
}

/// Runs at most `n` further steps (stopping at the planned end).
pub fn train_steps(
    state: &mut TrainState,
    source: &DomainDataset,
    target: &DomainDataset,
    n: usize,
    files: &RunFiles,
    mut access: Option<&mut AccessLog>,
) -> Result<(), TrainError> {
    state.check_data(source, target)?;
    if let Some(d) = &files.dir {
        fs::create_dir_all(d)?;
    }
    for _ in 0..n {
        if state.is_finished() {
            break;
        }
        let started = Instant::now();
        let cfg = state.config.clone();
        let (s_idx, t_idx, next) = schedule(state.cursor, state.n_source, state.n_target, cfg.batch_size, cfg.seed);
        if let Some(log) = access.as_deref_mut() {
            log.extend(s_idx.iter().map(|&i| format!("source:{}", source.episodes[i].id)));
            log.extend(t_idx.iter().map(|&i| format!("target:{}", target.episodes[i].id)));
        }
        let result = (|| -> Result<_, TrainError> {
            let sg = build_step(state, source, target, &s_idx, &t_idx)?;
            if !sg.breakdown.total.is_finite() {
                return Err(TrainError::Model(ModelError::Tensor(TensorError::NonFinite { op: "loss" })));
            }
            let grads = sg.graph.backward(sg.root)?.for_params(&sg.graph);
            let (disc, gen): (IndexMap<String, Tensor>, IndexMap<String, Tensor>) =
                grads.into_iter().partition(|(k, _)| is_discriminator_param(k));
            let mut next_state = state.clone();
            let mut gn = 0.0;
            let mut bn = 0.0;
            if !cfg.freeze_generator {
                gn = next_state.opt_generator.step(&mut next_state.model.params, &gen)?;
            }
            if !cfg.freeze_discriminator && !disc.is_empty() {
                bn = next_state.opt_discriminator.step(&mut next_state.model.params, &disc)?;
            }
            if !next_state.model.params.all_finite() {
                return Err(TrainError::Model(ModelError::Tensor(TensorError::NonFinite { op: "update" })));
            }
            Ok((next_state, sg.breakdown, sg.lambda_eff, gn, bn))
        })();
        let (mut next_state, loss, lambda_eff, gn, bn) = match result {
            Ok(v) => v,
            Err(e) if is_nonfinite(&e) => {
                let checkpoint = files.checkpoint_path();
                if let Some(p) = &checkpoint {
                    state.save(p)?;
                }
                return Err(TrainError::Diverged {
                    step: state.step,
                    checkpoint,
                });
            }
            Err(e) => return Err(e),
        };
        let record = StepRecord {
            step: state.step,
            epoch: state.cursor.epoch,
            lambda_eff,
            loss,
            grad_norm_generator: gn,
            grad_norm_discriminator: bn,
        };
        next_state.step += 1;
        next_state.cursor = next;
        next_state.history.push(record.clone());
        *state = next_state;
        if let Some(d) = &files.dir {
            append_line(&d.join(LOG_FILE), &serde_json::to_string(&record)?)?;
            let timing = serde_json::json!({
                "step": record.step,
                "wall_ms": started.elapsed().as_secs_f64() * 1e3,
            });
            append_line(&d.join(TIMING_FILE), &timing.to_string())?;
            let due = state.config.checkpoint_every.is_some_and(|k| state.step.is_multiple_of(k)) || state.is_finished();
            if due {
                state.save(&d.join(CHECKPOINT_FILE))?;
            }
        }
    }
    Ok(())
}

fn append_line(path: &Path, line: &str) -> std::io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")
}

/// Trains to completion from `state`.
pub fn train(
    mut state: TrainState,
    source: &DomainDataset,
    target: &DomainDataset,
    files: &RunFiles,
) -> Result<TrainState, TrainError> {
    let remaining = state.planned_steps().saturating_sub(state.step);
    train_steps(&mut state, source, target, remaining, files, None)?;
    Ok(state)
}
