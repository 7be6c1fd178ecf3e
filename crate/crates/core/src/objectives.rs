//! Losses and distribution distances.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{log_sigmoid, Graph, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("sequence loss needs a non-empty history or horizon")]
    EmptySequence,
    #[error("{what}: {detail}")]
    Shape { what: &'static str, detail: String },
    #[error("empty sample set")]
    EmptySample,
    #[error("domain loss requires treated positions")]
    NoTreatedPositions,
    #[error("lambda must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("rbf bandwidth must be finite and positive, got {0}")]
    Bandwidth(f64),
    #[error("n_trials must be at least 1")]
    NoTrials,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    #[default]
    Linear,
    Rbf { bandwidth: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        match *self {
            KernelSpec::Rbf { bandwidth } if !(bandwidth > 0.0 && bandwidth.is_finite()) => {
                Err(ObjectiveError::Bandwidth(bandwidth))
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            KernelSpec::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            KernelSpec::Rbf { bandwidth } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-d2 / (2.0 * bandwidth * bandwidth)).exp()
            }
        }
    }
}

/// One episode's squared residuals split into history and horizon parts.
pub fn episode_seq_loss(hist: &[f64], horizon: &[f64]) -> Result<f64, ObjectiveError> {
    if hist.is_empty() && horizon.is_empty() {
        return Err(ObjectiveError::EmptySequence);
    }
    let part = |r: &[f64]| {
        if r.is_empty() {
            0.0
        } else {
            r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64
        }
    };
    Ok(part(hist) + part(horizon))
}

/// `Σ_i [(1/T) Σ_hist (y - ŷ)² + (1/τ) Σ_horizon (y - ŷ)²]` where the first
/// `hist_len` entries of every episode belong to the history.
pub fn seq_loss(actual: &[Vec<f64>], predicted: &[Vec<f64>], hist_len: usize) -> Result<f64, ObjectiveError> {
    if actual.len() != predicted.len() {
        return Err(ObjectiveError::Shape {
            what: "seq_loss",
            detail: format!("{} actual vs {} predicted episodes", actual.len(), predicted.len()),
        });
    }
    let mut total = 0.0;
    for (i, (a, p)) in actual.iter().zip(predicted).enumerate() {
        if a.len() != p.len() || hist_len > a.len() {
            return Err(ObjectiveError::Shape {
                what: "seq_loss",
                detail: format!("episode {i}: {} actual, {} predicted, history {hist_len}", a.len(), p.len()),
            });
        }
        let r: Vec<f64> = a.iter().zip(p).map(|(x, y)| x - y).collect();
        total += episode_seq_loss(&r[..hist_len], &r[hist_len..])?;
    }
    Ok(total)
}

/// Graph version: `residuals[t]` is a `[B, 1]` residual column for one
/// position; the first `hist_len` positions are history. Summed over the batch.
pub fn seq_loss_graph(g: &mut Graph, residuals: &[Var], hist_len: usize) -> Result<Var, ObjectiveError> {
    if residuals.is_empty() {
        return Err(ObjectiveError::EmptySequence);
    }
    let mut terms = Vec::new();
    for part in [&residuals[..hist_len], &residuals[hist_len..]] {
        if part.is_empty() {
            continue;
        }
        let stacked = g.concat_cols(part)?;
        let ss = g.sq_norm(stacked)?;
        terms.push(g.scale(ss, 1.0 / part.len() as f64)?);
    }
    let mut out = terms[0];
    for &t in &terms[1..] {
        out = g.add(out, t)?;
    }
    Ok(out)
}

/// Squared RKHS distance between two weighted kernel mean embeddings.
pub fn embedding_distance2(
    a: &[(f64, &[f64])],
    b: &[(f64, &[f64])],
    kernel: &KernelSpec,
) -> Result<f64, ObjectiveError> {
    kernel.validate()?;
    let d = a.first().or(b.first()).map_or(0, |(_, v)| v.len());
    if a.iter().chain(b).any(|(_, v)| v.len() != d) {
        return Err(ObjectiveError::Shape {
            what: "embedding_distance2",
            detail: "samples differ in dimension".into(),
        });
    }
    if let KernelSpec::Linear = kernel {
        let embed = |p: &[(f64, &[f64])]| {
            let mut m = vec![0.0; d];
            for (w, v) in p {
                for (o, x) in m.iter_mut().zip(v.iter()) {
                    *o += w * x;
                }
            }
            m
        };
        let (ma, mb) = (embed(a), embed(b));
        return Ok(ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum());
    }
    let gram = |p: &[(f64, &[f64])], q: &[(f64, &[f64])]| -> f64 {
        p.iter()
            .map(|(wp, vp)| q.iter().map(|(wq, vq)| wp * wq * kernel.eval(vp, vq)).sum::<f64>())
            .sum()
    };
    Ok((gram(a, a) + gram(b, b) - 2.0 * gram(a, b)).max(0.0))
}

fn uniform(samples: &[Vec<f64>]) -> Vec<(f64, &[f64])> {
    let w = 1.0 / samples.len() as f64;
    samples.iter().map(|s| (w, s.as_slice())).collect()
}

/// Biased (V-statistic) squared MMD. The linear kernel gives `‖mean S − mean T‖²`.
pub fn mmd2(s: &[Vec<f64>], t: &[Vec<f64>], kernel: &KernelSpec) -> Result<f64, ObjectiveError> {
    if s.is_empty() || t.is_empty() {
        return Err(ObjectiveError::EmptySample);
    }
    embedding_distance2(&uniform(s), &uniform(t), kernel)
}

/// Fraction of `n_perm` label permutations whose statistic reaches the
/// observed one (with the usual +1 correction), together with the observed
/// statistic and the 95th / 99th percentiles of the null.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationTest {
    pub observed: f64,
    pub p_value: f64,
    pub q95: f64,
    pub q99: f64,
}

pub fn mmd_permutation_test(
    s: &[Vec<f64>],
    t: &[Vec<f64>],
    kernel: &KernelSpec,
    n_perm: usize,
    seed: u64,
) -> Result<PermutationTest, ObjectiveError> {
    let observed = mmd2(s, t, kernel)?;
    let mut pool: Vec<Vec<f64>> = s.iter().chain(t).cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut null = Vec::with_capacity(n_perm);
    for _ in 0..n_perm {
        use rand::seq::SliceRandom;
        pool.shuffle(&mut rng);
        null.push(mmd2(&pool[..s.len()], &pool[s.len()..], kernel)?);
    }
    null.sort_by(|a, b| a.total_cmp(b));
    let q = |p: f64| null[((p * n_perm as f64).ceil() as usize).saturating_sub(1).min(n_perm - 1)];
    let exceed = null.iter().filter(|&&v| v >= observed).count();
    Ok(PermutationTest {
        observed,
        p_value: (exceed + 1) as f64 / (n_perm + 1) as f64,
        q95: q(0.95),
        q99: q(0.99),
    })
}

/// Samples with an optional treatment label; unlabelled samples count towards
/// `|D|` but not towards the conditional sums.
#[derive(Debug, Clone, Copy)]
pub struct Labelled<'a> {
    pub samples: &'a [Vec<f64>],
    pub labels: &'a [Option<usize>],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmmdValue {
    pub value: f64,
    pub warnings: Vec<String>,
}

fn conditional_embedding<'a>(d: &Labelled<'a>) -> Vec<(f64, &'a [f64])> {
    let w = 1.0 / d.samples.len() as f64;
    d.samples
        .iter()
        .zip(d.labels)
        .filter(|(_, l)| l.is_some())
        .map(|(s, _)| (w, s.as_slice()))
        .collect()
}

/// `‖(1/|S|) Σ_a Σ_{S|a} R − (1/|T|) Σ_a Σ_{T|a} R‖²` in the kernel's feature
/// space, with `samples` already holding the treatment-conditioned
/// reconstructions.
pub fn cmmd2(s: Labelled<'_>, t: Labelled<'_>, kernel: &KernelSpec) -> Result<CmmdValue, ObjectiveError> {
    for d in [&s, &t] {
        if d.samples.is_empty() {
            return Err(ObjectiveError::EmptySample);
        }
        if d.samples.len() != d.labels.len() {
            return Err(ObjectiveError::Shape {
                what: "cmmd2",
                detail: format!("{} samples, {} labels", d.samples.len(), d.labels.len()),
            });
        }
    }
    let present = |d: &Labelled<'_>| -> std::collections::BTreeSet<usize> { d.labels.iter().flatten().copied().collect() };
    let (ps, pt) = (present(&s), present(&t));
    let mut warnings = Vec::new();
    for a in ps.symmetric_difference(&pt) {
        let side = if ps.contains(a) { "source" } else { "target" };
        warnings.push(format!("treatment {a} appears only in the {side} domain"));
    }
    let value = embedding_distance2(&conditional_embedding(&s), &conditional_embedding(&t), kernel)?;
    Ok(CmmdValue { value, warnings })
}

/// `‖(1/|D|) Σ X − (1/|D|Z|) Σ_a Σ R‖²`: raw against conditional within one domain.
pub fn within_domain_cmmd2(x: &[Vec<f64>], r: Labelled<'_>, kernel: &KernelSpec) -> Result<f64, ObjectiveError> {
    let n_lab = r.labels.iter().filter(|l| l.is_some()).count();
    if x.is_empty() || n_lab == 0 {
        return Err(ObjectiveError::EmptySample);
    }
    let w = 1.0 / n_lab as f64;
    let cond: Vec<(f64, &[f64])> = r
        .samples
        .iter()
        .zip(r.labels)
        .filter(|(_, l)| l.is_some())
        .map(|(v, _)| (w, v.as_slice()))
        .collect();
    embedding_distance2(&uniform(x), &cond, kernel)
}

/// How the treatment-conditioned representation is formed from raw samples
/// in [`gap_bound_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionalMap {
    /// `R = X`.
    Identity,
    /// Each sample replaced by the mean of its domain's samples sharing its
    /// label: uniform attention over same-label positions.
    GroupMean,
}

pub fn group_means(samples: &[Vec<f64>], labels: &[Option<usize>]) -> Vec<Vec<f64>> {
    let d = samples.first().map_or(0, Vec::len);
    let mut sums: std::collections::BTreeMap<Option<usize>, (Vec<f64>, usize)> = Default::default();
    for (s, l) in samples.iter().zip(labels) {
        let e = sums.entry(*l).or_insert_with(|| (vec![0.0; d], 0));
        for (o, v) in e.0.iter_mut().zip(s) {
            *o += v;
        }
        e.1 += 1;
    }
    labels
        .iter()
        .map(|l| {
            let (s, n) = &sums[l];
            s.iter().map(|v| v / *n as f64).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundTrial {
    pub lhs: f64,
    pub rhs_am: f64,
    pub rhs_cm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub trials: Vec<BoundTrial>,
    pub violations_am: usize,
    pub violations_cm: usize,
    pub tolerance: f64,
}

/// Evaluates `a² ≤ ¼[a² + b² + c² + m² + 2·x·m]` on bootstrap resamples,
/// with `a = d(S|Z, T|Z)`, `b = d(S, S|Z)`, `c = d(T, T|Z)`, `m = d(S, T)` and
/// `x = a` (`rhs_am`) or `x = c` (`rhs_cm`).
pub fn gap_bound_check(
    s: Labelled<'_>,
    t: Labelled<'_>,
    kernel: &KernelSpec,
    map: ConditionalMap,
    n_trials: usize,
    tolerance: f64,
    seed: u64,
) -> Result<BoundReport, ObjectiveError> {
    if n_trials == 0 {
        return Err(ObjectiveError::NoTrials);
    }
    if s.samples.is_empty() || t.samples.is_empty() {
        return Err(ObjectiveError::EmptySample);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut resample = |d: &Labelled<'_>| -> (Vec<Vec<f64>>, Vec<Option<usize>>) {
        let n = d.samples.len();
        (0..n)
            .map(|_| {
                let i = rng.random_range(0..n);
                (d.samples[i].clone(), d.labels[i])
            })
            .unzip()
    };
    let mut trials = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let (xs, ls) = resample(&s);
        let (xt, lt) = resample(&t);
        let (rs, rt) = match map {
            ConditionalMap::Identity => (xs.clone(), xt.clone()),
            ConditionalMap::GroupMean => (group_means(&xs, &ls), group_means(&xt, &lt)),
        };
        let rs_l = Labelled { samples: &rs, labels: &ls };
        let rt_l = Labelled { samples: &rt, labels: &lt };
        let a2 = cmmd2(rs_l, rt_l, kernel)?.value;
        let b2 = within_domain_cmmd2(&xs, rs_l, kernel)?;
        let c2 = within_domain_cmmd2(&xt, rt_l, kernel)?;
        let m2 = mmd2(&xs, &xt, kernel)?;
        let (a, c, m) = (a2.sqrt(), c2.sqrt(), m2.sqrt());
        let base = a2 + b2 + c2 + m2;
        trials.push(BoundTrial {
            lhs: a2,
            rhs_am: 0.25 * (base + 2.0 * a * m),
            rhs_cm: 0.25 * (base + 2.0 * c * m),
        });
    }
    let violations_am = trials.iter().filter(|r| r.lhs - r.rhs_am > tolerance).count();
    let violations_cm = trials.iter().filter(|r| r.lhs - r.rhs_cm > tolerance).count();
    Ok(BoundReport {
        trials,
        violations_am,
        violations_cm,
        tolerance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainWeights {
    pub beta: [f64; 4],
    pub gamma: f64,
}

impl Default for DomainWeights {
    fn default() -> Self {
        Self {
            beta: [1.0; 4],
            gamma: 0.0,
        }
    }
}

/// One domain's inputs to the domain loss: observed covariates (constants),
/// reconstructions on the graph, and which positions carry a treatment label.
#[derive(Debug, Clone, Copy)]
pub struct DomainSide<'a> {
    pub x: &'a Tensor,
    pub r: Var,
    pub labelled: &'a [bool],
}

#[derive(Debug, Clone, Copy)]
pub struct DomainTerms {
    pub l1: Var,
    pub l2: Var,
    pub l3: Var,
    pub l4: Var,
    pub cross: Var,
    pub total: Var,
}

fn column_mean(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut m = Tensor::zeros(1, d);
    for i in 0..n {
        for j in 0..d {
            m.data_mut()[j] += x.data()[i * d + j];
        }
    }
    m.scale_in_place(1.0 / n as f64);
    m
}

/// L1..L4 and the optional cross term on the graph. Positions are flattened
/// over episodes and time.
pub fn domain_loss_graph(
    g: &mut Graph,
    s: DomainSide<'_>,
    t: DomainSide<'_>,
    w: &DomainWeights,
) -> Result<DomainTerms, ObjectiveError> {
    let mut parts = Vec::with_capacity(2);
    for side in [&s, &t] {
        let n = side.x.rows();
        if n == 0 || g.value(side.r).rows() != n || side.labelled.len() != n {
            return Err(ObjectiveError::Shape {
                what: "domain_loss",
                detail: format!(
                    "{n} covariate rows, {} reconstruction rows, {} labels",
                    g.value(side.r).rows(),
                    side.labelled.len()
                ),
            });
        }
        let idx: Vec<usize> = (0..n).filter(|&i| side.labelled[i]).collect();
        if idx.is_empty() {
            return Err(ObjectiveError::NoTreatedPositions);
        }
        let mx = g.constant(column_mean(side.x));
        let gathered = g.gather_rows(side.r, &idx)?;
        let sum_r = g.sum_axis(gathered, 0)?;
        // Σ_a Σ R over |D| for the cross-domain term, over |D|Z| within a domain.
        let r_over_d = g.scale(sum_r, 1.0 / n as f64)?;
        let r_over_dz = g.scale(sum_r, 1.0 / idx.len() as f64)?;
        parts.push((mx, r_over_d, r_over_dz));
    }
    let (mxs, rs_d, rs_dz) = parts[0];
    let (mxt, rt_d, rt_dz) = parts[1];
    let sqd = |g: &mut Graph, a: Var, b: Var, beta: f64| -> Result<Var, TensorError> {
        let d = g.sub(a, b)?;
        let n = g.sq_norm(d)?;
        g.scale(n, beta)
    };
    let l1 = sqd(g, mxs, mxt, w.beta[0])?;
    let l2 = sqd(g, rs_d, rt_d, w.beta[1])?;
    let l3 = sqd(g, mxs, rs_dz, w.beta[2])?;
    let l4 = sqd(g, mxt, rt_dz, w.beta[3])?;
    let cross = if w.gamma != 0.0 {
        let a = g.sqrt(l1)?;
        let b = g.sqrt(l2)?;
        let p = g.mul(a, b)?;
        g.scale(p, w.gamma)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let mut total = g.add(l1, l2)?;
    total = g.add(total, l3)?;
    total = g.add(total, l4)?;
    total = g.add(total, cross)?;
    Ok(DomainTerms {
        l1,
        l2,
        l3,
        l4,
        cross,
        total,
    })
}

/// Plain-value domain loss written as the squared norm of one stacked vector
/// `[√β1 (x̄S − x̄T); √β2 (R̄S − R̄T); √β3 (x̄S − R̄S|Z); √β4 (x̄T − R̄T|Z)]` plus
/// the cross term.
pub fn unified_domain_loss(
    xs: &[Vec<f64>],
    rs: &[Vec<f64>],
    ls: &[bool],
    xt: &[Vec<f64>],
    rt: &[Vec<f64>],
    lt: &[bool],
    w: &DomainWeights,
) -> Result<f64, ObjectiveError> {
    let mean_of = |v: &[Vec<f64>], mask: Option<&[bool]>, denom: usize| -> Vec<f64> {
        let d = v.first().map_or(0, Vec::len);
        let mut m = vec![0.0; d];
        for (i, row) in v.iter().enumerate() {
            if mask.is_none_or(|mk| mk[i]) {
                for (o, x) in m.iter_mut().zip(row) {
                    *o += x;
                }
            }
        }
        m.iter().map(|x| x / denom as f64).collect()
    };
    let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
    let (ns, nt, nzs, nzt) = (xs.len(), xt.len(), count(ls), count(lt));
    if ns == 0 || nt == 0 || nzs == 0 || nzt == 0 {
        return Err(ObjectiveError::NoTreatedPositions);
    }
    let mxs = mean_of(xs, None, ns);
    let mxt = mean_of(xt, None, nt);
    let stacked: Vec<f64> = [
        (w.beta[0], &mxs, mean_of(xt, None, nt)),
        (w.beta[1], &mean_of(rs, Some(ls), ns), mean_of(rt, Some(lt), nt)),
        (w.beta[2], &mxs, mean_of(rs, Some(ls), nzs)),
        (w.beta[3], &mxt, mean_of(rt, Some(lt), nzt)),
    ]
    .iter()
    .flat_map(|(beta, a, b)| a.iter().zip(b).map(move |(x, y)| beta.sqrt() * (x - y)).collect::<Vec<_>>())
    .collect();
    let d = mxs.len();
    let part = |k: usize| stacked[k * d..(k + 1) * d].iter().map(|v| v * v).sum::<f64>();
    let total: f64 = stacked.iter().map(|v| v * v).sum();
    Ok(total + w.gamma * part(0).sqrt() * part(1).sqrt())
}

/// Mean binary cross-entropy with source labelled 1 and target labelled 0.
pub fn domain_bce_graph(g: &mut Graph, logit_s: Var, logit_t: Var) -> Result<Var, ObjectiveError> {
    let ls = g.log_sigmoid(logit_s)?;
    let neg_t = g.neg(logit_t)?;
    let lt = g.log_sigmoid(neg_t)?;
    let n = (g.value(logit_s).len() + g.value(logit_t).len()) as f64;
    let a = g.sum_all(ls)?;
    let b = g.sum_all(lt)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, -1.0 / n)?)
}

/// Mean binary cross-entropy of logits against `{0, 1}` labels.
pub fn bce_logits(logits: &[f64], labels: &[f64]) -> f64 {
    let n = logits.len().max(1) as f64;
    -logits
        .iter()
        .zip(labels)
        .map(|(&l, &y)| y * log_sigmoid(l) + (1.0 - y) * log_sigmoid(-l))
        .sum::<f64>()
        / n
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_seq_source: f64,
    pub l_seq_target: f64,
    pub l_aux: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub cross_term: f64,
    pub l_dom: f64,
    pub l_disc: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveView {
    Generator,
    Discriminator,
}

/// Generator view: `l_seq_S + l_seq_T − λ (l_dom + l_disc)`.
/// Discriminator view: `λ · l_disc`.
pub fn total_objective(b: &LossBreakdown, lambda: f64, view: ObjectiveView) -> Result<f64, ObjectiveError> {
    if !(lambda >= 0.0) {
        return Err(ObjectiveError::NegativeLambda(lambda));
    }
    let disc = b.l_disc.unwrap_or(0.0);
    Ok(match view {
        ObjectiveView::Generator => b.l_seq_source + b.l_seq_target - lambda * (b.l_dom + disc),
        ObjectiveView::Discriminator => lambda * disc,
    })
}
