//! Linear-Gaussian structural causal model for sequential treatments.
//!
//! ```text
//! y[t]     = c·x[t] + eta[t]
//! z[t]     ~ policy(y[t-1])                      (y[-1] = 0)
//! x[t+1]   = f(A x[t]) + B[z[t-lag]] + L u + eps[t]
//! ```
//!
//! `f` is the identity or `tanh`. Treatments before the start of the
//! episode (`t - lag < 0`) count as index 0. The exogenous noise is stored
//! on the episode so counterfactuals can be replayed exactly.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{default_vocabulary, DataError, DomainDataset, DomainTag, Episode, NoiseTrace};

#[derive(Debug, Error)]
pub enum ScmError {
    #[error("unstable transition: spectral radius {0:.6} is not below 1")]
    Unstable(f64),
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("time index {t} out of range: need t + 1 + lag < {len} (lag {lag})")]
    TimeRange { t: usize, len: usize, lag: usize },
    #[error("treatment {z} outside 0..{k}")]
    Treatment { z: usize, k: usize },
    #[error("episode '{0}' has no noise trace; simulate with trace retention to answer counterfactual queries")]
    MissingTrace(String),
    #[error("causal structure must be shared: {0}")]
    StructureShift(String),
    #[error("policy shift leaves a negative probability for the reference arm ({0:.6})")]
    NegativeProbability(f64),
    #[error("need at least {min} {what}, got {got}")]
    Size { what: &'static str, min: usize, got: usize },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Logging policy: probabilities of each treatment given the previous outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Policy {
    Uniform,
    Fixed { z: usize },
    /// `softmax(base_logits + slope * y_prev)`.
    Softmax { base_logits: Vec<f64>, slope: Vec<f64> },
}

impl Policy {
    pub fn probabilities(&self, k: usize, y_prev: f64) -> Vec<f64> {
        match self {
            Policy::Uniform => vec![1.0 / k as f64; k],
            Policy::Fixed { z } => (0..k).map(|i| if i == *z { 1.0 } else { 0.0 }).collect(),
            Policy::Softmax { base_logits, slope } => {
                let logits: Vec<f64> = (0..k).map(|i| base_logits[i] + slope[i] * y_prev).collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            }
        }
    }

    fn validate(&self, k: usize) -> Result<(), ScmError> {
        match self {
            Policy::Uniform => Ok(()),
            Policy::Fixed { z } if *z < k => Ok(()),
            Policy::Fixed { z } => Err(ScmError::Treatment { z: *z, k }),
            Policy::Softmax { base_logits, slope } => {
                if base_logits.len() != k || slope.len() != k {
                    return Err(ScmError::Spec(format!(
                        "policy needs {k} logits and slopes, got {} and {}",
                        base_logits.len(),
                        slope.len()
                    )));
                }
                if base_logits.iter().chain(slope).all(|v| v.is_finite()) {
                    Ok(())
                } else {
                    Err(ScmError::Spec("policy parameters must be finite".into()))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScmSpec {
    pub d_x: usize,
    pub k: usize,
    /// Row-major `d_x × d_x`.
    pub a: Vec<Vec<f64>>,
    /// One effect vector per treatment.
    pub b: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub u_dim: usize,
    /// `d_x × u_dim`.
    pub u_load: Vec<Vec<f64>>,
    pub noise_scale: Vec<f64>,
    pub outcome_noise: f64,
    pub x0_scale: f64,
    pub u_scale: f64,
    pub lag: usize,
    pub nonlinear: bool,
    pub policy: Policy,
    /// Per-treatment multipliers on the policy probabilities of treatments
    /// `1..k`; the reference arm absorbs the remainder. Empty means none.
    #[serde(default)]
    pub rate_multipliers: Vec<f64>,
    pub treatment_names: Vec<String>,
}

impl Default for ScmSpec {
    fn default() -> Self {
        let d_x = 4;
        Self {
            d_x,
            k: 5,
            a: vec![
                vec![0.6, 0.1, 0.0, 0.0],
                vec![0.0, 0.5, 0.1, 0.0],
                vec![0.0, 0.0, 0.4, 0.1],
                vec![0.1, 0.0, 0.0, 0.5],
            ],
            b: vec![
                vec![0.0, 0.0, 0.0, 0.0],
                vec![0.8, 0.4, 0.0, 0.2],
                vec![0.3, 0.1, 0.2, 0.0],
                vec![-0.5, -0.2, 0.0, 0.1],
                vec![0.0, 0.6, -0.3, 0.3],
            ],
            c: vec![1.0, 0.5, 0.2, -0.2],
            u_dim: 2,
            u_load: vec![vec![0.2, 0.0], vec![0.0, 0.1], vec![0.1, 0.1], vec![0.0, 0.0]],
            noise_scale: vec![0.1; d_x],
            outcome_noise: 0.05,
            x0_scale: 0.5,
            u_scale: 1.0,
            lag: 1,
            nonlinear: false,
            policy: Policy::Softmax {
                base_logits: vec![2.0, 0.0, 0.0, -0.5, -0.5],
                slope: vec![0.0, -0.5, -0.3, 0.2, 0.0],
            },
            rate_multipliers: Vec::new(),
            treatment_names: default_vocabulary(),
        }
    }
}

impl ScmSpec {
    pub fn validate(&self) -> Result<(), ScmError> {
        let (d, k) = (self.d_x, self.k);
        let bad = |m: String| Err(ScmError::Spec(m));
        if d == 0 {
            return bad("d_x must be positive".into());
        }
        if k < 2 {
            return bad(format!("need at least 2 treatments, got {k}"));
        }
        if self.a.len() != d || self.a.iter().any(|r| r.len() != d) {
            return bad(format!("A must be {d}x{d}"));
        }
        if self.b.len() != k || self.b.iter().any(|r| r.len() != d) {
            return bad(format!("B must hold {k} vectors of length {d}"));
        }
        if self.c.len() != d {
            return bad(format!("c must have length {d}"));
        }
        if self.u_load.len() != d || self.u_load.iter().any(|r| r.len() != self.u_dim) {
            return bad(format!("u_load must be {d}x{}", self.u_dim));
        }
        if self.noise_scale.len() != d || self.noise_scale.iter().any(|s| !(*s >= 0.0)) {
            return bad(format!("noise_scale must hold {d} non-negative values"));
        }
        for (name, v) in [
            ("outcome_noise", self.outcome_noise),
            ("x0_scale", self.x0_scale),
            ("u_scale", self.u_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if self.treatment_names.len() != k {
            return bad(format!("{} treatment names for {k} treatments", self.treatment_names.len()));
        }
        if !self.rate_multipliers.is_empty() && self.rate_multipliers.len() != k {
            return bad(format!("rate_multipliers must be empty or hold {k} values"));
        }
        let all = self.a.iter().chain(&self.b).chain(&self.u_load).flatten().chain(&self.c);
        if !all.into_iter().all(|v| v.is_finite()) {
            return bad("matrices must be finite".into());
        }
        self.policy.validate(k)?;
        let rho = self.spectral_radius();
        if !(rho < 1.0) {
            return Err(ScmError::Unstable(rho));
        }
        Ok(())
    }

    pub fn a_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.d_x, self.d_x, |i, j| self.a[i][j])
    }

    pub fn spectral_radius(&self) -> f64 {
        self.a_matrix()
            .complex_eigenvalues()
            .iter()
            .map(|e| e.norm())
            .fold(0.0, f64::max)
    }

    /// Logging probabilities after applying `rate_multipliers`.
    pub fn treatment_probabilities(&self, y_prev: f64) -> Result<Vec<f64>, ScmError> {
        let mut p = self.policy.probabilities(self.k, y_prev);
        if !self.rate_multipliers.is_empty() {
            for (pz, m) in p.iter_mut().zip(&self.rate_multipliers).skip(1) {
                *pz *= m;
            }
            let rest: f64 = p[1..].iter().sum();
            p[0] = 1.0 - rest;
            if p[0] < -1e-12 {
                return Err(ScmError::NegativeProbability(p[0]));
            }
            p[0] = p[0].max(0.0);
        }
        Ok(p)
    }

    /// Outcome effect of treatment `z` relative to the reference arm, `c·(B[z] - B[0])`.
    pub fn outcome_effect(&self, z: usize) -> f64 {
        dot(&self.c, &self.b[z]) - dot(&self.c, &self.b[0])
    }

    /// Deterministic part of the transition from `x` under active effect `z`.
    pub fn transition_mean(&self, x: &[f64], z: usize, u: &[f64]) -> Vec<f64> {
        (0..self.d_x)
            .map(|i| {
                let ax = dot(&self.a[i], x);
                let fx = if self.nonlinear { ax.tanh() } else { ax };
                fx + self.b[z][i] + dot(&self.u_load[i], u)
            })
            .collect()
    }

    fn transition(&self, x: &[f64], z: usize, u: &[f64], eps: &[f64]) -> Vec<f64> {
        self.transition_mean(x, z, u)
            .into_iter()
            .zip(eps)
            .map(|(m, e)| m + e)
            .collect()
    }

    fn outcome(&self, x: &[f64], eta: f64) -> f64 {
        dot(&self.c, x) + eta
    }

    /// Stationary covariate mean under a constant treatment, `(I - A)^-1 (B[z] + L u)`.
    /// Only meaningful for the linear transition.
    pub fn stationary_mean(&self, z: usize, u: &[f64]) -> Vec<f64> {
        let drift: Vec<f64> = (0..self.d_x).map(|i| self.b[z][i] + dot(&self.u_load[i], u)).collect();
        let m = self.inverse_i_minus_a();
        (0..self.d_x).map(|i| (0..self.d_x).map(|j| m[(i, j)] * drift[j]).sum()).collect()
    }

    fn inverse_i_minus_a(&self) -> DMatrix<f64> {
        let i_a = DMatrix::identity(self.d_x, self.d_x) - self.a_matrix();
        i_a.try_inverse().expect("I - A is invertible when the spectral radius is below 1")
    }

    /// Standard error of the time average of `y` over `n` steps of one long
    /// stationary run, using the long-run variance `c' (I-A)^-1 S (I-A)^-T c`
    /// plus the white outcome noise.
    pub fn stationary_y_mean_se(&self, n: usize) -> f64 {
        let m = self.inverse_i_minus_a();
        let w: Vec<f64> = (0..self.d_x).map(|j| (0..self.d_x).map(|i| self.c[i] * m[(i, j)]).sum()).collect();
        let lrv: f64 = w.iter().zip(&self.noise_scale).map(|(wi, s)| wi * wi * s * s).sum();
        ((lrv + self.outcome_noise * self.outcome_noise) / n as f64).sqrt()
    }

    fn effective_z(&self, z: &[usize], t: usize) -> usize {
        if t >= self.lag {
            z[t - self.lag]
        } else {
            0
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gaussian(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    let s: f64 = StandardNormal.sample(rng);
    s * scale
}

fn sample_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let r: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if r < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Simulates one episode from its own random stream.
pub fn simulate_episode(spec: &ScmSpec, id: String, len: usize, seed: u64, stream: u64) -> Result<Episode, ScmError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let d = spec.d_x;
    let u: Vec<f64> = (0..spec.u_dim).map(|_| gaussian(&mut rng, spec.u_scale)).collect();
    let mut x = Vec::with_capacity(len);
    x.push((0..d).map(|_| gaussian(&mut rng, spec.x0_scale)).collect::<Vec<f64>>());
    let mut z = Vec::with_capacity(len);
    let mut y = Vec::with_capacity(len);
    let mut eps = Vec::with_capacity(len.saturating_sub(1));
    let mut eta = Vec::with_capacity(len);
    for t in 0..len {
        let e_t = gaussian(&mut rng, spec.outcome_noise);
        eta.push(e_t);
        y.push(spec.outcome(&x[t], e_t));
        let y_prev = if t == 0 { 0.0 } else { y[t - 1] };
        let probs = spec.treatment_probabilities(y_prev)?;
        z.push(sample_index(&mut rng, &probs));
        if t + 1 < len {
            let e: Vec<f64> = spec.noise_scale.iter().map(|&s| gaussian(&mut rng, s)).collect();
            let zeff = spec.effective_z(&z, t);
            let next = spec.transition(&x[t], zeff, &u, &e);
            eps.push(e);
            x.push(next);
        }
    }
    if !y.iter().chain(x.iter().flatten()).all(|v| v.is_finite()) {
        return Err(ScmError::Spec(format!("episode {id} diverged")));
    }
    Ok(Episode {
        id,
        start_month: 0,
        x,
        z,
        y,
        u,
        noise: Some(NoiseTrace { eps, eta }),
    })
}

fn simulate_range(
    spec: &ScmSpec,
    prefix: &str,
    n: usize,
    len: usize,
    seed: u64,
    stream_offset: u64,
) -> Result<Vec<Episode>, ScmError> {
    (0..n)
        .into_par_iter()
        .map(|i| simulate_episode(spec, format!("{prefix}{i:05}"), len, seed, stream_offset + i as u64))
        .collect()
}

/// `n_episodes` independent episodes of length `len`. Episode `i` uses random
/// stream `i` of `seed`, so the output does not depend on thread count.
pub fn simulate(spec: &ScmSpec, n_episodes: usize, len: usize, seed: u64) -> Result<Vec<Episode>, ScmError> {
    spec.validate()?;
    if n_episodes < 1 {
        return Err(ScmError::Size {
            what: "episodes",
            min: 1,
            got: n_episodes,
        });
    }
    if len < 2 {
        return Err(ScmError::Size {
            what: "timesteps",
            min: 2,
            got: len,
        });
    }
    simulate_range(spec, "w", n_episodes, len, seed, 0)
}

pub fn simulate_dataset(spec: &ScmSpec, n_episodes: usize, len: usize, seed: u64) -> Result<DomainDataset, ScmError> {
    let eps = simulate(spec, n_episodes, len, seed)?;
    Ok(DomainDataset::new(DomainTag::Source, eps, spec.treatment_names.clone())?)
}

fn effect_index(spec: &ScmSpec, episode: &Episode, t: usize, z: usize) -> Result<usize, ScmError> {
    if z >= spec.k {
        return Err(ScmError::Treatment { z, k: spec.k });
    }
    let target = t + 1 + spec.lag;
    if target >= episode.len() {
        return Err(ScmError::TimeRange {
            t,
            len: episode.len(),
            lag: spec.lag,
        });
    }
    Ok(target)
}

/// `E[X_{t+1+lag} | history, do(Z_t = z)]`, conditioning on the factual path
/// up to `t + lag`, which `Z_t` cannot influence.
pub fn intervene(spec: &ScmSpec, episode: &Episode, t: usize, z: usize) -> Result<Vec<f64>, ScmError> {
    let target = effect_index(spec, episode, t, z)?;
    Ok(spec.transition_mean(&episode.x[target - 1], z, &episode.u))
}

/// Conditional mean given the observed treatment at `t`. Under the simulator
/// the history blocks every back-door path, so this equals `intervene` at the
/// factual arm.
pub fn conditional_mean(spec: &ScmSpec, episode: &Episode, t: usize) -> Result<Vec<f64>, ScmError> {
    intervene(spec, episode, t, episode.z[t])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Counterfactual {
    /// Index of the first affected step, `t + 1 + lag`.
    pub index: usize,
    pub x: Vec<f64>,
    pub y: f64,
}

/// Abduction with the stored noise: replays the step affected by `Z_t`
/// with `z` substituted.
pub fn counterfactual(spec: &ScmSpec, episode: &Episode, t: usize, z: usize) -> Result<Counterfactual, ScmError> {
    let trace = episode
        .noise
        .as_ref()
        .ok_or_else(|| ScmError::MissingTrace(episode.id.clone()))?;
    let target = effect_index(spec, episode, t, z)?;
    let x = spec.transition(&episode.x[target - 1], z, &episode.u, &trace.eps[target - 1]);
    let y = spec.outcome(&x, trace.eta[target]);
    Ok(Counterfactual { index: target, x, y })
}

/// `E[X | do(z)] - E[X | do(z_ref)]` at the step affected by `Z_t`. Effects
/// enter the transition additively, so this is `B[z] - B[z_ref]` for every
/// history.
pub fn oracle_cate(spec: &ScmSpec, episode: &Episode, t: usize, z: usize, z_ref: usize) -> Result<Vec<f64>, ScmError> {
    effect_index(spec, episode, t, z)?;
    effect_index(spec, episode, t, z_ref)?;
    Ok(spec.b[z].iter().zip(&spec.b[z_ref]).map(|(x, y)| x - y).collect())
}

/// The contrast between `do(z)` and conditioning on the observed arm. Zero
/// for the observed treatment; `B[z] - B[Z_t]` on the linear spec.
pub fn literal_cate(spec: &ScmSpec, episode: &Episode, t: usize, z: usize) -> Result<Vec<f64>, ScmError> {
    let a = intervene(spec, episode, t, z)?;
    let b = conditional_mean(spec, episode, t)?;
    Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    /// Replaces the logging policy in the target domain.
    #[serde(default)]
    pub target_policy: Option<Policy>,
    /// Multipliers on target treatment rates (index 0 is ignored).
    #[serde(default)]
    pub rate_multipliers: Vec<f64>,
    /// Treatments that never occur in the target domain.
    #[serde(default)]
    pub unavailable: Vec<usize>,
    /// Perturbations of the transition or outcome loading. Any nonzero entry
    /// is rejected.
    #[serde(default)]
    pub a_delta: Vec<Vec<f64>>,
    #[serde(default)]
    pub c_delta: Vec<f64>,
}

impl DomainShift {
    pub fn is_zero(&self) -> bool {
        self.target_policy.is_none()
            && self.rate_multipliers.iter().all(|&m| m == 1.0)
            && self.unavailable.is_empty()
    }

    pub fn apply(&self, spec: &ScmSpec) -> Result<ScmSpec, ScmError> {
        if self.a_delta.iter().flatten().any(|&v| v != 0.0) {
            return Err(ScmError::StructureShift("the transition matrix A differs".into()));
        }
        if self.c_delta.iter().any(|&v| v != 0.0) {
            return Err(ScmError::StructureShift("the outcome loading c differs".into()));
        }
        let mut out = spec.clone();
        if let Some(p) = &self.target_policy {
            out.policy = p.clone();
        }
        let mut mult = if self.rate_multipliers.is_empty() {
            vec![1.0; spec.k]
        } else if self.rate_multipliers.len() == spec.k {
            self.rate_multipliers.clone()
        } else {
            return Err(ScmError::Spec(format!("rate_multipliers must hold {} values", spec.k)));
        };
        for &z in &self.unavailable {
            if z == 0 || z >= spec.k {
                return Err(ScmError::Spec(format!("cannot remove treatment {z}")));
            }
            mult[z] = 0.0;
        }
        if !spec.rate_multipliers.is_empty() {
            for (m, base) in mult.iter_mut().zip(&spec.rate_multipliers) {
                *m *= base;
            }
        }
        out.rate_multipliers = if mult.iter().all(|&m| m == 1.0) { Vec::new() } else { mult };
        out.validate()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSizes {
    pub source_episodes: usize,
    pub target_episodes: usize,
    pub length: usize,
}

impl DomainSizes {
    /// Target count as a fraction of the source count, at least 1.
    pub fn with_fraction(source_episodes: usize, fraction: f64, length: usize) -> Self {
        Self {
            source_episodes,
            target_episodes: ((source_episodes as f64 * fraction).round() as usize).max(1),
            length,
        }
    }
}

/// Source and target datasets that share `A`, `B`, `c` and `L` and differ only
/// through the treatment mechanism. Both draw from `seed` on disjoint
/// streams.
pub fn make_domain_pair(
    spec: &ScmSpec,
    shift: &DomainShift,
    sizes: &DomainSizes,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset), ScmError> {
    spec.validate()?;
    let target_spec = shift.apply(spec)?;
    for (what, n) in [("source episodes", sizes.source_episodes), ("target episodes", sizes.target_episodes)] {
        if n < 1 {
            return Err(ScmError::Size { what, min: 1, got: n });
        }
    }
    if sizes.length < 2 {
        return Err(ScmError::Size {
            what: "timesteps",
            min: 2,
            got: sizes.length,
        });
    }
    let src = simulate_range(spec, "s", sizes.source_episodes, sizes.length, seed, 0)?;
    let tgt = simulate_range(
        &target_spec,
        "t",
        sizes.target_episodes,
        sizes.length,
        seed,
        sizes.source_episodes as u64,
    )?;
    Ok((
        DomainDataset::new(DomainTag::Source, src, spec.treatment_names.clone())?,
        DomainDataset::new(DomainTag::Target, tgt, spec.treatment_names.clone())?,
    ))
}
