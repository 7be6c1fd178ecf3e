//! The forecaster: recurrent history encoder, CATE head, answer/key
//! attention, outcome encoder over reconstructions, per-domain outcome heads
//! and a domain discriminator.
//!
//! Position `t` of an episode carries `x[t]`, `y[t]` and the treatment of the
//! previous transition `z[t-1]` (with `z[-1] = 0`). The key stored at `t`
//! comes from the CATE estimate that produced `x[t]`; the answer at `t` is the
//! embedding of `z[t-1]`. Every prediction is produced by the same per-step
//! routine whether inputs are observed or fed back, so teacher-forced and
//! step-by-step evaluations agree exactly.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::attend_graph;
use crate::autodiff::{Graph, Var};
use crate::dataset::{DomainTag, Episode};
use crate::params::ParamStore;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    /// Gated recurrent unit.
    Gru,
    /// `h' = tanh(x W + h U + b)`.
    Tanh,
}

/// Which arm the CATE used for keys is contrasted against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CateContrast {
    /// `mu(h, z) - mu(h, 0)`.
    ReferenceArm,
    /// `mu(h, z) - E[x | h, z observed]`, which is identically zero for the
    /// factual arm.
    ObservedArm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_h: usize,
    pub d_k: usize,
    pub window: usize,
    pub mu_hidden: usize,
    pub head_hidden: usize,
    pub disc_hidden: usize,
    pub cell: CellKind,
    pub separate_generators: bool,
    pub cate_contrast: CateContrast,
    pub zero_treatment_pathways: bool,
    pub use_static: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_h: 32,
            d_k: 8,
            window: 12,
            mu_hidden: 16,
            head_hidden: 16,
            disc_hidden: 16,
            cell: CellKind::Gru,
            separate_generators: false,
            cate_contrast: CateContrast::ReferenceArm,
            zero_treatment_pathways: false,
            use_static: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("d_h", self.d_h),
            ("d_k", self.d_k),
            ("window", self.window),
            ("mu_hidden", self.mu_hidden),
            ("head_hidden", self.head_hidden),
            ("disc_hidden", self.disc_hidden),
        ] {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Data dimensions a model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_x: usize,
    pub k: usize,
    pub u_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdaModel {
    pub config: ModelConfig,
    pub dims: Dims,
    pub params: ParamStore,
}

/// Whether positions past the observed prefix use data or model output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedKind {
    Observed,
    Predicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Feed {
    /// Positions `0..observed` always take `x` and `y` from the input.
    pub observed: usize,
    pub x: FeedKind,
    pub y: FeedKind,
}

impl Feed {
    pub fn teacher_forced() -> Self {
        Self {
            observed: usize::MAX,
            x: FeedKind::Observed,
            y: FeedKind::Observed,
        }
    }
}

/// `B` aligned episodes of equal length, laid out per position.
#[derive(Debug, Clone)]
pub struct BatchInput {
    pub x: Vec<Tensor>,
    pub z: Vec<Vec<usize>>,
    pub y: Vec<Tensor>,
    pub u: Tensor,
}

impl BatchInput {
    pub fn from_episodes(episodes: &[&Episode]) -> Result<Self, ModelError> {
        let first = episodes
            .first()
            .ok_or_else(|| ModelError::Input("empty batch".into()))?;
        let len = first.len();
        if episodes.iter().any(|e| e.len() != len) {
            return Err(ModelError::Input("episodes in a batch must share a length".into()));
        }
        let b = episodes.len();
        let d_x = first.d_x();
        let u_dim = first.u.len();
        let mut x = Vec::with_capacity(len);
        let mut z = Vec::with_capacity(len);
        let mut y = Vec::with_capacity(len);
        for t in 0..len {
            let mut xt = Vec::with_capacity(b * d_x);
            for e in episodes {
                xt.extend_from_slice(&e.x[t]);
            }
            x.push(Tensor::new(vec![b, d_x], xt)?);
            z.push(episodes.iter().map(|e| e.z[t]).collect());
            y.push(Tensor::new(vec![b, 1], episodes.iter().map(|e| e.y[t]).collect())?);
        }
        let u = Tensor::new(vec![b, u_dim], episodes.iter().flat_map(|e| e.u.iter().copied()).collect())?;
        Ok(Self { x, z, y, u })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn batch(&self) -> usize {
        self.u.rows()
    }
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `y_hat[i]` predicts position `i + 1`.
    pub y_hat: Vec<Var>,
    /// `mu[i] = mu(h_i, z_i)`, the covariate prediction for position `i + 1`.
    pub mu: Vec<Var>,
    pub r: Vec<Var>,
    pub alpha: Vec<Var>,
    pub x_used: Vec<Var>,
    pub h: Vec<Var>,
    pub h_r: Vec<Var>,
    pub keys: Vec<Var>,
    pub answers: Vec<Var>,
    /// Temporal mean of `r`, `[B, d_x]`.
    pub pooled: Var,
}

struct CellVars {
    kind: CellKind,
    w: [Var; 3],
    u: [Var; 3],
    b: [Var; 3],
}

struct MuVars {
    w_lin: Var,
    w_h: Var,
    w_z: Var,
    b: Var,
    w_o: Var,
    b_o: Var,
    e_z: Var,
}

struct HeadVars {
    w_lin: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b: Var,
}

struct Bound {
    enc: CellVars,
    renc: CellVars,
    mu: MuVars,
    w_k: Var,
    b_k: Var,
    emb: Var,
    head: HeadVars,
}

pub fn generator_prefix(config: &ModelConfig, tag: DomainTag) -> &'static str {
    match (config.separate_generators, tag) {
        (false, _) => "gen",
        (true, DomainTag::Source) => "gen_s",
        (true, DomainTag::Target) => "gen_t",
    }
}

pub fn head_prefix(tag: DomainTag) -> &'static str {
    match tag {
        DomainTag::Source => "head_s",
        DomainTag::Target => "head_t",
    }
}

/// True for discriminator parameters (`Θ_B`); everything else is `Θ_G`.
pub fn is_discriminator_param(name: &str) -> bool {
    name.starts_with("disc.")
}

fn cell_names(prefix: &str, kind: CellKind) -> Vec<String> {
    match kind {
        CellKind::Gru => ["z", "r", "n"]
            .iter()
            .flat_map(|g| ["w", "u", "b"].map(|p| format!("{prefix}.{p}_{g}")))
            .collect(),
        CellKind::Tanh => ["w", "u", "b"].iter().map(|p| format!("{prefix}.{p}")).collect(),
    }
}

impl CdaModel {
    pub fn new(config: ModelConfig, dims: Dims, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if dims.d_x == 0 || dims.k < 2 {
            return Err(ModelError::Config(format!(
                "need d_x >= 1 and k >= 2, got d_x {} and k {}",
                dims.d_x, dims.k
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (d_x, k, d_h) = (dims.d_x, dims.k, config.d_h);
        let u_in = if config.use_static { dims.u_dim } else { 0 };
        let gens: &[&str] = if config.separate_generators {
            &["gen_s", "gen_t"]
        } else {
            &["gen"]
        };
        for g in gens {
            init_cell(&mut p, &format!("{g}.enc"), config.cell, d_x + k + 1 + u_in, d_h, &mut rng);
            let m = config.mu_hidden;
            p.init_uniform(format!("{g}.mu.w_lin"), d_h, d_x, &mut rng);
            p.init_uniform(format!("{g}.mu.w_h"), d_h, m, &mut rng);
            p.init_uniform(format!("{g}.mu.w_z"), k, m, &mut rng);
            p.init_zeros(format!("{g}.mu.b"), 1, m);
            p.init_uniform(format!("{g}.mu.w_o"), m, d_x, &mut rng);
            p.init_zeros(format!("{g}.mu.b_o"), 1, d_x);
            p.init_uniform(format!("{g}.mu.e_z"), k, d_x, &mut rng);
            p.init_uniform(format!("{g}.attn.w_k"), d_x, config.d_k, &mut rng);
            p.init_zeros(format!("{g}.attn.b_k"), 1, config.d_k);
            p.init_uniform(format!("{g}.attn.emb"), k, config.d_k, &mut rng);
            init_cell(&mut p, &format!("{g}.renc"), config.cell, d_x + k + 1, d_h, &mut rng);
        }
        let in_h = d_h + d_x + k;
        for h in ["head_s", "head_t"] {
            p.init_uniform(format!("{h}.w_lin"), in_h, 1, &mut rng);
            p.init_uniform(format!("{h}.w1"), in_h, config.head_hidden, &mut rng);
            p.init_zeros(format!("{h}.b1"), 1, config.head_hidden);
            p.init_uniform(format!("{h}.w2"), config.head_hidden, 1, &mut rng);
            p.init_zeros(format!("{h}.b"), 1, 1);
        }
        p.init_uniform("disc.w1", d_x, config.disc_hidden, &mut rng);
        p.init_zeros("disc.b1", 1, config.disc_hidden);
        p.init_uniform("disc.w2", config.disc_hidden, 1, &mut rng);
        p.init_zeros("disc.b2", 1, 1);
        Ok(Self { config, dims, params: p })
    }

    pub fn encoder_input_dim(&self) -> usize {
        let u_in = if self.config.use_static { self.dims.u_dim } else { 0 };
        self.dims.d_x + self.dims.k + 1 + u_in
    }

    fn bind(&self, g: &mut Graph, tag: DomainTag) -> Result<Bound, ModelError> {
        let gp = generator_prefix(&self.config, tag);
        let hp = head_prefix(tag);
        let p = &self.params;
        let mut v = |name: String| g.param(p, &name);
        let cell = |v: &mut dyn FnMut(String) -> Result<Var, TensorError>, prefix: String| -> Result<CellVars, TensorError> {
            let names = cell_names(&prefix, self.config.cell);
            let vars = names.into_iter().map(&mut *v).collect::<Result<Vec<_>, _>>()?;
            Ok(match self.config.cell {
                CellKind::Gru => CellVars {
                    kind: CellKind::Gru,
                    w: [vars[0], vars[3], vars[6]],
                    u: [vars[1], vars[4], vars[7]],
                    b: [vars[2], vars[5], vars[8]],
                },
                CellKind::Tanh => CellVars {
                    kind: CellKind::Tanh,
                    w: [vars[0]; 3],
                    u: [vars[1]; 3],
                    b: [vars[2]; 3],
                },
            })
        };
        let enc = cell(&mut v, format!("{gp}.enc"))?;
        let renc = cell(&mut v, format!("{gp}.renc"))?;
        let mu = MuVars {
            w_lin: v(format!("{gp}.mu.w_lin"))?,
            w_h: v(format!("{gp}.mu.w_h"))?,
            w_z: v(format!("{gp}.mu.w_z"))?,
            b: v(format!("{gp}.mu.b"))?,
            w_o: v(format!("{gp}.mu.w_o"))?,
            b_o: v(format!("{gp}.mu.b_o"))?,
            e_z: v(format!("{gp}.mu.e_z"))?,
        };
        Ok(Bound {
            enc,
            renc,
            mu,
            w_k: v(format!("{gp}.attn.w_k"))?,
            b_k: v(format!("{gp}.attn.b_k"))?,
            emb: v(format!("{gp}.attn.emb"))?,
            head: HeadVars {
                w_lin: v(format!("{hp}.w_lin"))?,
                w1: v(format!("{hp}.w1"))?,
                b1: v(format!("{hp}.b1"))?,
                w2: v(format!("{hp}.w2"))?,
                b: v(format!("{hp}.b"))?,
            },
        })
    }

    fn treat(&self, g: &mut Graph, zs: &[usize]) -> Result<Var, ModelError> {
        let k = self.dims.k;
        if let Some(&bad) = zs.iter().find(|&&z| z >= k) {
            return Err(ModelError::Input(format!("treatment {bad} outside 0..{k}")));
        }
        let t = if self.config.zero_treatment_pathways {
            Tensor::zeros(zs.len(), k)
        } else {
            Tensor::one_hot(zs, k)?
        };
        Ok(g.constant(t))
    }

    fn cell_step(g: &mut Graph, c: &CellVars, h: Var, inp: Var) -> Result<Var, TensorError> {
        let pre = |g: &mut Graph, i: usize, hh: Var| -> Result<Var, TensorError> {
            let a = g.matmul(inp, c.w[i])?;
            let b = g.matmul(hh, c.u[i])?;
            let s = g.add(a, b)?;
            g.add(s, c.b[i])
        };
        match c.kind {
            CellKind::Tanh => {
                let s = pre(g, 0, h)?;
                g.tanh(s)
            }
            CellKind::Gru => {
                let zs = pre(g, 0, h)?;
                let z = g.sigmoid(zs)?;
                let rs = pre(g, 1, h)?;
                let r = g.sigmoid(rs)?;
                let rh = g.mul(r, h)?;
                let ns = pre(g, 2, rh)?;
                let n = g.tanh(ns)?;
                let diff = g.sub(h, n)?;
                let gated = g.mul(z, diff)?;
                g.add(n, gated)
            }
        }
    }

    fn mu_graph(g: &mut Graph, m: &MuVars, h: Var, oh: Var) -> Result<Var, TensorError> {
        let lin = g.matmul(h, m.w_lin)?;
        let a = g.matmul(h, m.w_h)?;
        let b = g.matmul(oh, m.w_z)?;
        let s = g.add(a, b)?;
        let s = g.add(s, m.b)?;
        let hid = g.tanh(s)?;
        let o = g.matmul(hid, m.w_o)?;
        let out = g.add(lin, o)?;
        let out = g.add(out, m.b_o)?;
        let e = g.matmul(oh, m.e_z)?;
        g.add(out, e)
    }

    fn head_graph(g: &mut Graph, hv: &HeadVars, inp: Var) -> Result<Var, TensorError> {
        let lin = g.matmul(inp, hv.w_lin)?;
        let a = g.matmul(inp, hv.w1)?;
        let a = g.add(a, hv.b1)?;
        let hid = g.tanh(a)?;
        let o = g.matmul(hid, hv.w2)?;
        let s = g.add(lin, o)?;
        g.add(s, hv.b)
    }

    /// Discriminator logit for a `[B, d_x]` pooled representation.
    pub fn disc_logit(&self, g: &mut Graph, pooled: Var) -> Result<Var, ModelError> {
        let w1 = g.param(&self.params, "disc.w1")?;
        let b1 = g.param(&self.params, "disc.b1")?;
        let w2 = g.param(&self.params, "disc.w2")?;
        let b2 = g.param(&self.params, "disc.b2")?;
        let a = g.matmul(pooled, w1)?;
        let a = g.add(a, b1)?;
        let h = g.tanh(a)?;
        let o = g.matmul(h, w2)?;
        Ok(g.add(o, b2)?)
    }

    /// Forward pass over a batch. See [`Feed`] for how inputs past the
    /// observed prefix are chosen.
    pub fn run(&self, g: &mut Graph, input: &BatchInput, tag: DomainTag, feed: Feed) -> Result<Trace, ModelError> {
        let len = input.len();
        if len == 0 {
            return Err(ModelError::Input("episode prefix must have at least one step".into()));
        }
        if feed.observed == 0 {
            return Err(ModelError::Input("at least the first position must be observed".into()));
        }
        let b = input.batch();
        let d_x = self.dims.d_x;
        if input.x[0].cols() != d_x {
            return Err(ModelError::Input(format!(
                "covariate width {} does not match model d_x {d_x}",
                input.x[0].cols()
            )));
        }
        let bv = self.bind(g, tag)?;
        let u = if self.config.use_static && self.dims.u_dim > 0 {
            if input.u.cols() != self.dims.u_dim {
                return Err(ModelError::Input(format!(
                    "static width {} does not match model u_dim {}",
                    input.u.cols(),
                    self.dims.u_dim
                )));
            }
            Some(g.constant(input.u.clone()))
        } else {
            None
        };
        let ref_arm = vec![0usize; b];
        let mut h = g.constant(Tensor::zeros(b, self.config.d_h));
        let mut h_r = g.constant(Tensor::zeros(b, self.config.d_h));
        let mut window: VecDeque<(Var, Var)> = VecDeque::with_capacity(self.config.window + 1);

        let mut tr = Trace {
            y_hat: Vec::with_capacity(len),
            mu: Vec::with_capacity(len),
            r: Vec::with_capacity(len),
            alpha: Vec::with_capacity(len),
            x_used: Vec::with_capacity(len),
            h: Vec::with_capacity(len),
            h_r: Vec::with_capacity(len),
            keys: Vec::with_capacity(len),
            answers: Vec::with_capacity(len),
            pooled: h,
        };

        // Position 0: the key is the projection of a zero contrast.
        let zero_cate = g.constant(Tensor::zeros(b, d_x));
        let kk = g.matmul(zero_cate, bv.w_k)?;
        let mut key = g.add(kk, bv.b_k)?;
        let mut x_t = g.constant(input.x[0].clone());
        let mut y_t = g.constant(input.y[0].clone());
        let mut oh_prev = self.treat(g, &ref_arm)?;
        let (alpha, r, answer) = self.attend_step(g, &bv, &mut window, x_t, key, oh_prev)?;
        let mut r_t = r;
        tr.alpha.push(alpha);
        tr.answers.push(answer);

        for t in 0..len {
            tr.x_used.push(x_t);
            tr.keys.push(key);
            tr.r.push(r_t);
            let mut parts = vec![x_t, oh_prev, y_t];
            if let Some(u) = u {
                parts.push(u);
            }
            let inp = g.concat_cols(&parts)?;
            h = Self::cell_step(g, &bv.enc, h, inp)?;
            let inp_r = g.concat_cols(&[r_t, oh_prev, y_t])?;
            h_r = Self::cell_step(g, &bv.renc, h_r, inp_r)?;
            tr.h.push(h);
            tr.h_r.push(h_r);
            if t + 1 == len {
                break;
            }
            let oh_t = self.treat(g, &input.z[t])?;
            let mu_t = Self::mu_graph(g, &bv.mu, h, oh_t)?;
            tr.mu.push(mu_t);
            let cate = match self.config.cate_contrast {
                CateContrast::ReferenceArm => {
                    let oh0 = self.treat(g, &ref_arm)?;
                    let mu0 = Self::mu_graph(g, &bv.mu, h, oh0)?;
                    g.sub(mu_t, mu0)?
                }
                CateContrast::ObservedArm => g.sub(mu_t, mu_t)?,
            };
            let kk = g.matmul(cate, bv.w_k)?;
            key = g.add(kk, bv.b_k)?;
            let observed = t + 1 < feed.observed;
            x_t = if observed || feed.x == FeedKind::Observed {
                g.constant(input.x[t + 1].clone())
            } else {
                mu_t
            };
            let (alpha, r, answer) = self.attend_step(g, &bv, &mut window, x_t, key, oh_t)?;
            tr.alpha.push(alpha);
            tr.answers.push(answer);
            let head_in = g.concat_cols(&[h_r, r, oh_t])?;
            let y_hat = Self::head_graph(g, &bv.head, head_in)?;
            tr.y_hat.push(y_hat);
            y_t = if observed || feed.y == FeedKind::Observed {
                g.constant(input.y[t + 1].clone())
            } else {
                y_hat
            };
            r_t = r;
            oh_prev = oh_t;
        }
        let mut acc = tr.r[0];
        for &r in &tr.r[1..] {
            acc = g.add(acc, r)?;
        }
        tr.pooled = g.scale(acc, 1.0 / len as f64)?;
        Ok(tr)
    }

    fn attend_step(
        &self,
        g: &mut Graph,
        bv: &Bound,
        window: &mut VecDeque<(Var, Var)>,
        x: Var,
        key: Var,
        oh_answer: Var,
    ) -> Result<(Var, Var, Var), ModelError> {
        window.push_back((x, key));
        while window.len() > self.config.window {
            window.pop_front();
        }
        let answer = g.matmul(oh_answer, bv.emb)?;
        let slots: Vec<(Var, Var)> = window.iter().copied().collect();
        let (alpha, r) = attend_graph(g, answer, &slots)?;
        Ok((alpha, r, answer))
    }

    /// Hidden states `h_t` for every position of a fully observed episode.
    pub fn encode(&self, episode: &Episode, tag: DomainTag) -> Result<EncodedHistory, ModelError> {
        let mut g = Graph::new();
        let input = BatchInput::from_episodes(&[episode])?;
        let tr = self.run(&mut g, &input, tag, Feed::teacher_forced())?;
        Ok(EncodedHistory {
            h: tr.h.iter().map(|&v| g.value(v).row(0).to_vec()).collect(),
        })
    }

    fn with_h<T>(
        &self,
        h: &[f64],
        tag: DomainTag,
        f: impl FnOnce(&Self, &mut Graph, &Bound, Var) -> Result<T, ModelError>,
    ) -> Result<T, ModelError> {
        if h.len() != self.config.d_h {
            return Err(ModelError::Input(format!("hidden state of width {} for d_h {}", h.len(), self.config.d_h)));
        }
        let mut g = Graph::new();
        let bv = self.bind(&mut g, tag)?;
        let hv = g.constant(Tensor::row_vector(h));
        f(self, &mut g, &bv, hv)
    }

    /// `mu(h, z)`, the predicted next covariates under treatment `z`.
    pub fn mu(&self, h: &[f64], z: usize, tag: DomainTag) -> Result<Vec<f64>, ModelError> {
        self.with_h(h, tag, |m, g, bv, hv| {
            let oh = m.treat(g, &[z])?;
            let out = Self::mu_graph(g, &bv.mu, hv, oh)?;
            Ok(g.value(out).data().to_vec())
        })
    }

    /// `mu(h, z) - mu(h, z_ref)`.
    pub fn cate_hat(&self, h: &[f64], z: usize, z_ref: usize, tag: DomainTag) -> Result<Vec<f64>, ModelError> {
        let a = self.mu(h, z, tag)?;
        let b = self.mu(h, z_ref, tag)?;
        Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
    }

    /// The answer embedding of `z` and the key projected from the CATE of
    /// `z` at hidden state `h`.
    pub fn answer_key(&self, h: &[f64], z: usize, tag: DomainTag) -> Result<AnswerKeyPair, ModelError> {
        self.with_h(h, tag, |m, g, bv, hv| {
            let oh = m.treat(g, &[z])?;
            let answer = g.matmul(oh, bv.emb)?;
            let mu_z = Self::mu_graph(g, &bv.mu, hv, oh)?;
            let cate = match m.config.cate_contrast {
                CateContrast::ReferenceArm => {
                    let oh0 = m.treat(g, &[0])?;
                    let mu0 = Self::mu_graph(g, &bv.mu, hv, oh0)?;
                    g.sub(mu_z, mu0)?
                }
                CateContrast::ObservedArm => g.sub(mu_z, mu_z)?,
            };
            let kk = g.matmul(cate, bv.w_k)?;
            let key = g.add(kk, bv.b_k)?;
            Ok(AnswerKeyPair {
                a: g.value(answer).data().to_vec(),
                k: g.value(key).data().to_vec(),
            })
        })
    }

    /// Domain probability of a pooled reconstruction.
    pub fn discriminate(&self, pooled: &[f64]) -> Result<f64, ModelError> {
        let mut g = Graph::new();
        let p = g.constant(Tensor::row_vector(pooled));
        let logit = self.disc_logit(&mut g, p)?;
        Ok(crate::autodiff::sigmoid(g.scalar(logit)))
    }

    /// Forecasts `future_z.len()` steps past the end of `history`.
    /// `future_z[0]` is the treatment applied at the last observed position.
    pub fn forecast(
        &self,
        history: &Episode,
        future_z: &[usize],
        tag: DomainTag,
        x_source: XSource<'_>,
    ) -> Result<Forecast, ModelError> {
        let horizon = future_z.len();
        if history.is_empty() {
            return Err(ModelError::Input("history must contain at least one step".into()));
        }
        if horizon == 0 {
            return Ok(Forecast::default());
        }
        let t0 = history.len() - 1;
        let mut ep = history.clone();
        ep.noise = None;
        ep.z[t0] = future_z[0];
        let x_feed = match x_source {
            XSource::Observed(xs) => {
                if xs.len() != horizon {
                    return Err(ModelError::Input(format!(
                        "{} observed covariate rows for horizon {horizon}",
                        xs.len()
                    )));
                }
                ep.x.extend(xs.iter().cloned());
                FeedKind::Observed
            }
            XSource::Rollout => {
                ep.x.extend(std::iter::repeat_n(vec![0.0; self.dims.d_x], horizon));
                FeedKind::Predicted
            }
        };
        ep.z.extend(future_z[1..].iter().copied());
        ep.z.push(0);
        ep.y.extend(std::iter::repeat_n(0.0, horizon));
        let input = BatchInput::from_episodes(&[&ep])?;
        let mut g = Graph::new();
        let tr = self.run(
            &mut g,
            &input,
            tag,
            Feed {
                observed: t0 + 1,
                x: x_feed,
                y: FeedKind::Predicted,
            },
        )?;
        let row = |v: Var| g.value(v).row(0).to_vec();
        Ok(Forecast {
            y_hat: tr.y_hat[t0..].iter().map(|&v| g.value(v).item()).collect(),
            x_hat: tr.mu[t0..].iter().map(|&v| row(v)).collect(),
            r: tr.r[t0 + 1..].iter().map(|&v| row(v)).collect(),
            alpha_last: tr.alpha.last().map(|&v| row(v)).unwrap_or_default(),
        })
    }

    /// Teacher-forced one-step predictions `y_hat[1..T]` for a full episode.
    pub fn predict_teacher_forced(&self, episode: &Episode, tag: DomainTag) -> Result<Vec<f64>, ModelError> {
        let mut g = Graph::new();
        let input = BatchInput::from_episodes(&[episode])?;
        let tr = self.run(&mut g, &input, tag, Feed::teacher_forced())?;
        Ok(tr.y_hat.iter().map(|&v| g.value(v).item()).collect())
    }

    /// Dense `T × T` attention matrix and reconstructions for one episode.
    pub fn attention_map(&self, episode: &Episode, tag: DomainTag) -> Result<AttentionMap, ModelError> {
        let mut g = Graph::new();
        let input = BatchInput::from_episodes(&[episode])?;
        let tr = self.run(&mut g, &input, tag, Feed::teacher_forced())?;
        let n = episode.len();
        let w = self.config.window;
        let mut alpha = vec![vec![0.0; n]; n];
        for (t, &a) in tr.alpha.iter().enumerate() {
            let nb = crate::attention::neighbourhood(t, w);
            for (tp, &v) in nb.zip(g.value(a).row(0)) {
                alpha[t][tp] = v;
            }
        }
        Ok(AttentionMap {
            alpha,
            r: tr.r.iter().map(|&v| g.value(v).row(0).to_vec()).collect(),
            keys: tr.keys.iter().map(|&v| g.value(v).row(0).to_vec()).collect(),
            h: tr.h.iter().map(|&v| g.value(v).row(0).to_vec()).collect(),
        })
    }
}

fn init_cell(p: &mut ParamStore, prefix: &str, kind: CellKind, n_in: usize, d_h: usize, rng: &mut ChaCha8Rng) {
    let names = cell_names(prefix, kind);
    for chunk in names.chunks(3) {
        p.init_uniform(chunk[0].clone(), n_in, d_h, rng);
        p.init_uniform(chunk[1].clone(), d_h, d_h, rng);
        p.init_zeros(chunk[2].clone(), 1, d_h);
    }
}

pub enum XSource<'a> {
    /// Future covariates supplied by the caller (teacher forcing).
    Observed(&'a [Vec<f64>]),
    /// Covariates produced by the CATE head.
    Rollout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedHistory {
    pub h: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnswerKeyPair {
    pub a: Vec<f64>,
    pub k: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Forecast {
    pub y_hat: Vec<f64>,
    pub x_hat: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    /// Attention weights of the final forecast position over its window.
    pub alpha_last: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub alpha: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub keys: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> Dims {
        Dims { d_x: 2, k: 3, u_dim: 1 }
    }

    fn small() -> ModelConfig {
        ModelConfig {
            d_h: 5,
            d_k: 3,
            window: 3,
            mu_hidden: 4,
            head_hidden: 4,
            disc_hidden: 3,
            ..ModelConfig::default()
        }
    }

    fn episode(len: usize) -> Episode {
        Episode {
            id: "e".into(),
            start_month: 0,
            x: (0..len).map(|t| vec![(t as f64 * 0.3).sin(), (t as f64 * 0.7).cos()]).collect(),
            z: (0..len).map(|t| t % 3).collect(),
            y: (0..len).map(|t| (t as f64 * 0.2).sin()).collect(),
            u: vec![0.5],
            noise: None,
        }
    }

    #[test]
    fn cate_hat_is_antisymmetric_and_zero_on_diagonal() {
        let m = CdaModel::new(small(), dims(), 1).unwrap();
        let h = m.encode(&episode(4), DomainTag::Source).unwrap().h[2].clone();
        assert!(m.cate_hat(&h, 1, 1, DomainTag::Source).unwrap().iter().all(|&v| v == 0.0));
        let a = m.cate_hat(&h, 1, 2, DomainTag::Source).unwrap();
        let b = m.cate_hat(&h, 2, 1, DomainTag::Source).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn reference_arm_key_is_the_bias() {
        let mut m = CdaModel::new(small(), dims(), 1).unwrap();
        m.params.insert("gen.attn.b_k", Tensor::row_vector(&[0.1, -0.2, 0.3]));
        let h = vec![0.3; 5];
        let pair = m.answer_key(&h, 0, DomainTag::Source).unwrap();
        assert_eq!(pair.k, vec![0.1, -0.2, 0.3]);
    }

    #[test]
    fn horizon_one_is_mu() {
        let m = CdaModel::new(small(), dims(), 2).unwrap();
        let ep = episode(5);
        let f = m.forecast(&ep, &[2], DomainTag::Target, XSource::Rollout).unwrap();
        let h = m.encode(&ep, DomainTag::Target).unwrap().h[4].clone();
        assert_eq!(f.x_hat[0], m.mu(&h, 2, DomainTag::Target).unwrap());
        assert_eq!(f.y_hat.len(), 1);
        assert!(m.forecast(&ep, &[], DomainTag::Target, XSource::Rollout).unwrap().y_hat.is_empty());
    }

    #[test]
    fn zeroed_discriminator_is_half() {
        let mut m = CdaModel::new(small(), dims(), 3).unwrap();
        m.params.insert("disc.w2", Tensor::zeros(3, 1));
        assert_eq!(m.discriminate(&[1.0, -4.0]).unwrap(), 0.5);
    }

    #[test]
    fn tanh_cell_with_zero_inputs_stays_at_tanh_bias() {
        let cfg = ModelConfig {
            cell: CellKind::Tanh,
            ..small()
        };
        let mut m = CdaModel::new(cfg, dims(), 4).unwrap();
        let bias = [0.2, -0.4, 0.0, 1.0, -1.5];
        m.params.insert("gen.enc.b", Tensor::row_vector(&bias));
        m.params.insert("gen.enc.u", Tensor::zeros(5, 5));
        let mut ep = episode(4);
        for row in &mut ep.x {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        ep.y.iter_mut().for_each(|v| *v = 0.0);
        ep.z.iter_mut().for_each(|v| *v = 0);
        ep.u = vec![0.0];
        // z = 0 still sets its one-hot column, so zero that input row too.
        let w = m.params.get("gen.enc.w").unwrap().clone();
        let mut w0 = w.clone();
        for j in 0..5 {
            w0.set(2, j, 0.0);
        }
        m.params.insert("gen.enc.w", w0);
        let h = m.encode(&ep, DomainTag::Source).unwrap().h;
        for ht in h {
            for (v, b) in ht.iter().zip(bias) {
                assert_eq!(*v, f64::tanh(b));
            }
        }
    }
}
