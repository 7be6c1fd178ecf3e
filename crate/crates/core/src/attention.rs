//! Answer/key attention over a past-only window.
//!
//! The plain `f64` functions here are the reference implementation; the
//! model evaluates the same arithmetic on the autodiff graph through
//! [`attend_graph`].

use std::ops::Range;

use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::tensor::TensorError;

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("empty neighbourhood")]
    EmptyNeighbourhood,
    #[error("answer has dimension {answer}, key {index} has {key}")]
    KeyDim { answer: usize, key: usize, index: usize },
    #[error("alpha row {row} is not a distribution over its window (sum {sum})")]
    NotStochastic { row: usize, sum: f64 },
    #[error("alpha[{row}][{col}] lies outside the window {start}..={row}")]
    OutsideWindow { row: usize, col: usize, start: usize },
    #[error("window must be at least 1")]
    Window,
    #[error("shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `N(t) = {t - w + 1, ..., t}` clipped at 0.
pub fn neighbourhood(t: usize, window: usize) -> Range<usize> {
    (t + 1).saturating_sub(window)..t + 1
}

/// Scaled inner product `<a, k> / sqrt(d_k)`.
pub fn alignment(answer: &[f64], key: &[f64]) -> f64 {
    let d = answer.len().max(1) as f64;
    answer.iter().zip(key).map(|(a, k)| a * k).sum::<f64>() / d.sqrt()
}

/// Max-shifted softmax of arbitrary scores.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>, AttentionError> {
    if scores.is_empty() {
        return Err(AttentionError::EmptyNeighbourhood);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / total).collect())
}

/// Normalised alignment of one answer against the keys of its neighbourhood.
pub fn causal_score(answer: &[f64], keys: &[&[f64]]) -> Result<Vec<f64>, AttentionError> {
    for (index, k) in keys.iter().enumerate() {
        if k.len() != answer.len() {
            return Err(AttentionError::KeyDim {
                answer: answer.len(),
                key: k.len(),
                index,
            });
        }
    }
    softmax(&keys.iter().map(|k| alignment(answer, k)).collect::<Vec<_>>())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// `T × d_x`.
    pub r: Vec<Vec<f64>>,
    /// Dense `T × T`; entries outside `N(t)` are exactly zero.
    pub alpha: Vec<Vec<f64>>,
}

/// `R_t = Σ_{t' ∈ N(t)} alpha[t][t'] X_{t'}` after checking that each row of
/// `alpha` is a distribution supported on `N(t)`.
pub fn reconstruct(alpha: &[Vec<f64>], x: &[Vec<f64>], window: usize) -> Result<Reconstruction, AttentionError> {
    if window == 0 {
        return Err(AttentionError::Window);
    }
    if alpha.len() != x.len() || alpha.iter().any(|row| row.len() != x.len()) {
        return Err(AttentionError::Shape(format!(
            "alpha must be {n}x{n} for {n} positions",
            n = x.len()
        )));
    }
    let d = x.first().map_or(0, Vec::len);
    let mut r = Vec::with_capacity(x.len());
    for (t, row) in alpha.iter().enumerate() {
        let nb = neighbourhood(t, window);
        for (col, &a) in row.iter().enumerate() {
            if !nb.contains(&col) && a != 0.0 {
                return Err(AttentionError::OutsideWindow {
                    row: t,
                    col,
                    start: nb.start,
                });
            }
        }
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&a| a < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(AttentionError::NotStochastic { row: t, sum });
        }
        let mut rt = vec![0.0; d];
        for tp in nb {
            for (o, v) in rt.iter_mut().zip(&x[tp]) {
                *o += row[tp] * v;
            }
        }
        r.push(rt);
    }
    Ok(Reconstruction {
        r,
        alpha: alpha.to_vec(),
    })
}

/// Scores every position against its window and reconstructs `x`.
pub fn attend(
    answers: &[Vec<f64>],
    keys: &[Vec<f64>],
    x: &[Vec<f64>],
    window: usize,
) -> Result<Reconstruction, AttentionError> {
    if window == 0 {
        return Err(AttentionError::Window);
    }
    let n = x.len();
    if answers.len() != n || keys.len() != n {
        return Err(AttentionError::Shape(format!(
            "{} answers and {} keys for {n} positions",
            answers.len(),
            keys.len()
        )));
    }
    let mut alpha = vec![vec![0.0; n]; n];
    for t in 0..n {
        let nb = neighbourhood(t, window);
        let ks: Vec<&[f64]> = keys[nb.clone()].iter().map(Vec::as_slice).collect();
        let w = causal_score(&answers[t], &ks)?;
        for (tp, wt) in nb.zip(w) {
            alpha[t][tp] = wt;
        }
    }
    reconstruct(&alpha, x, window)
}

/// Graph form of one attention row for a batch: `answer` is `[B, d_k]` and
/// `window` holds `(x [B, d_x], key [B, d_k])` pairs. Returns `(alpha [B, n], R [B, d_x])`.
pub fn attend_graph(g: &mut Graph, answer: Var, window: &[(Var, Var)]) -> Result<(Var, Var), TensorError> {
    let d_k = g.value(answer).cols().max(1) as f64;
    let mut scores = Vec::with_capacity(window.len());
    for &(_, key) in window {
        let s = g.row_dot(answer, key)?;
        scores.push(g.scale(s, 1.0 / d_k.sqrt())?);
    }
    let s = g.concat_cols(&scores)?;
    let alpha = g.softmax(s, 1)?;
    let xs: Vec<Var> = window.iter().map(|&(x, _)| x).collect();
    let r = g.weighted_sum(alpha, &xs)?;
    Ok((alpha, r))
}
