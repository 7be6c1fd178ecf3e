//! Self-checks behind the `check` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{attend, neighbourhood};
use crate::autodiff::{grad_check, Graph};
use crate::dataset::Episode;
use crate::eval::metrics;
use crate::model::{is_discriminator_param, CdaModel, Dims, ModelConfig};
use crate::objectives::{
    domain_loss_graph, gap_bound_check, unified_domain_loss, ConditionalMap, DomainSide, DomainWeights, KernelSpec,
    Labelled,
};
use crate::scm::{counterfactual, simulate, ScmSpec};
use crate::tensor::Tensor;
use crate::trainer::{objective, DomainMode, TrainConfig, TrainError};

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, r: Result<String, String>) -> CheckOutcome {
    match r {
        Ok(detail) => CheckOutcome {
            name,
            passed: true,
            detail,
        },
        Err(detail) => CheckOutcome {
            name,
            passed: false,
            detail,
        },
    }
}

/// A tiny model and a source/target pair of short episodes.
pub fn toy_setup(seed: u64) -> (CdaModel, Episode, Episode) {
    let spec = ScmSpec::default();
    let eps = simulate(&spec, 2, 6, seed).expect("default spec simulates");
    let config = ModelConfig {
        d_h: 4,
        d_k: 2,
        window: 3,
        mu_hidden: 3,
        head_hidden: 3,
        disc_hidden: 3,
        ..ModelConfig::default()
    };
    let dims = Dims {
        d_x: spec.d_x,
        k: spec.k,
        u_dim: spec.u_dim,
    };
    let model = CdaModel::new(config, dims, seed).expect("toy model");
    let mut it = eps.into_iter();
    (model, it.next().unwrap(), it.next().unwrap())
}

/// Finite-difference check of the full training objective on the toy. In
/// discriminator mode the generator sees a reversed gradient by design, so
/// only the discriminator's parameters are compared there.
pub fn objective_grad_check(seed: u64, mode: DomainMode) -> Result<(f64, usize), String> {
    let (model, s, t) = toy_setup(seed);
    let cfg = TrainConfig {
        domain_mode: mode,
        domain_weights: DomainWeights {
            beta: [1.0, 0.7, 1.3, 0.9],
            gamma: 0.0,
        },
        ..TrainConfig::default()
    };
    let only: Option<Vec<&str>> = (mode != DomainMode::Cmmd).then(|| {
        model
            .params
            .names()
            .filter(|n| is_discriminator_param(n))
            .map(String::as_str)
            .collect()
    });
    let report = grad_check(&model.params, only.as_deref(), 1e-5, 1e-4, |g: &mut Graph, p| {
        let m = CdaModel {
            params: p.clone(),
            ..model.clone()
        };
        Ok::<_, TrainError>(objective(g, &m, &cfg, 0.8, &[&s], &[&t])?.0)
    })
    .map_err(|e| e.to_string())?;
    if report.passed {
        Ok((report.max_rel_error, report.checked))
    } else {
        let f = &report.failures[0];
        Err(format!(
            "{} mismatches, first {}[{}]: analytic {} numeric {}",
            report.failures.len(),
            f.param,
            f.index,
            f.analytic,
            f.numeric
        ))
    }
}

fn gaussian_cloud(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64, k: usize) -> (Vec<Vec<f64>>, Vec<Option<usize>>) {
    (0..n)
        .map(|_| {
            let label = rng.random_range(0..k);
            let v = (0..d)
                .map(|_| {
                    let g: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                    g + shift + 0.3 * label as f64
                })
                .collect();
            (v, Some(label))
        })
        .unzip()
}

pub fn gap_bound_trials(seed: u64, trials: usize) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (xs, ls) = gaussian_cloud(&mut rng, 60, 3, 0.0, 3);
    let (xt, lt) = gaussian_cloud(&mut rng, 40, 3, 0.8, 3);
    let rep = gap_bound_check(
        Labelled { samples: &xs, labels: &ls },
        Labelled { samples: &xt, labels: &lt },
        &KernelSpec::Linear,
        ConditionalMap::GroupMean,
        trials,
        1e-9,
        seed,
    )
    .map_err(|e| e.to_string())?;
    if rep.violations_am == 0 {
        Ok(format!(
            "{} trials, 0 violations (the alternative cross-term form is violated in {})",
            trials, rep.violations_cm
        ))
    } else {
        Err(format!("{} of {trials} trials violate the bound", rep.violations_am))
    }
}

pub fn domain_loss_identity(seed: u64, toys: usize) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..toys {
        let d = rng.random_range(1..4);
        let ns = rng.random_range(2..7);
        let nt = rng.random_range(2..7);
        let mut draw = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect() };
        let (xs, rs, xt, rt) = (draw(ns), draw(ns), draw(nt), draw(nt));
        let mut mask = |n: usize| -> Vec<bool> {
            let mut m: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
            m[0] = true;
            m
        };
        let (ms, mt) = (mask(ns), mask(nt));
        let w = DomainWeights {
            beta: [
                rng.random_range(0.1..2.0),
                rng.random_range(0.1..2.0),
                rng.random_range(0.1..2.0),
                rng.random_range(0.1..2.0),
            ],
            gamma: rng.random_range(0.0..1.0),
        };
        let unified = unified_domain_loss(&xs, &rs, &ms, &xt, &rt, &mt, &w).map_err(|e| e.to_string())?;
        let mut g = Graph::new();
        let tx = |v: &Vec<Vec<f64>>| Tensor::from_rows(v).unwrap();
        let (txs, txt) = (tx(&xs), tx(&xt));
        let rsv = g.constant(tx(&rs));
        let rtv = g.constant(tx(&rt));
        let terms = domain_loss_graph(
            &mut g,
            DomainSide { x: &txs, r: rsv, labelled: &ms },
            DomainSide { x: &txt, r: rtv, labelled: &mt },
            &w,
        )
        .map_err(|e| e.to_string())?;
        let parts = g.scalar(terms.l1) + g.scalar(terms.l2) + g.scalar(terms.l3) + g.scalar(terms.l4) + g.scalar(terms.cross);
        let diff = (unified - parts).abs().max((g.scalar(terms.total) - unified).abs());
        worst = worst.max(diff);
    }
    if worst <= 1e-12 {
        Ok(format!("{toys} toys, max difference {worst:e}"))
    } else {
        Err(format!("max difference {worst:e}"))
    }
}

pub fn attention_contracts(seed: u64, batches: usize) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in 0..batches {
        let n = rng.random_range(1..12);
        let d = rng.random_range(1..4);
        let dk = rng.random_range(1..4);
        let w = rng.random_range(1..6);
        let mut mat = |rows: usize, cols: usize| -> Vec<Vec<f64>> {
            (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-3.0..3.0)).collect()).collect()
        };
        let (a, k, x) = (mat(n, dk), mat(n, dk), mat(n, d));
        let rec = attend(&a, &k, &x, w).map_err(|e| format!("batch {b}: {e}"))?;
        for t in 0..n {
            let nb = neighbourhood(t, w);
            let sum: f64 = rec.alpha[t].iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(format!("batch {b}: row {t} sums to {sum}"));
            }
            if rec.alpha[t].iter().enumerate().any(|(c, &v)| !nb.contains(&c) && v != 0.0) {
                return Err(format!("batch {b}: row {t} has weight outside its window"));
            }
            for (j, &r) in rec.r[t].iter().enumerate() {
                let lo = nb.clone().map(|i| x[i][j]).fold(f64::INFINITY, f64::min);
                let hi = nb.clone().map(|i| x[i][j]).fold(f64::NEG_INFINITY, f64::max);
                if r < lo - 1e-12 || r > hi + 1e-12 {
                    return Err(format!("batch {b}: R[{t}][{j}] = {r} outside [{lo}, {hi}]"));
                }
            }
        }
        let own = attend(&a, &k, &x, 1).map_err(|e| e.to_string())?;
        if own.r != x {
            return Err(format!("batch {b}: a one-step window does not reproduce X"));
        }
    }
    Ok(format!("{batches} random batches"))
}

pub fn simulator_oracles(seed: u64, queries: usize) -> Result<String, String> {
    let spec = ScmSpec {
        lag: 0,
        ..ScmSpec::default()
    };
    let eps = simulate(&spec, 20, 12, seed).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut worst: f64 = 0.0;
    for q in 0..queries {
        let e = &eps[rng.random_range(0..eps.len())];
        let t = rng.random_range(0..e.len() - 1);
        let z = rng.random_range(0..spec.k);
        let factual = counterfactual(&spec, e, t, e.z[t]).map_err(|err| err.to_string())?;
        if factual.x != e.x[factual.index] || factual.y != e.y[factual.index] {
            return Err(format!("query {q}: replaying the factual arm does not reproduce the data"));
        }
        let cf = counterfactual(&spec, e, t, z).map_err(|err| err.to_string())?;
        for i in 0..spec.d_x {
            let got = cf.x[i] - e.x[cf.index][i];
            let want = spec.b[z][i] - spec.b[e.z[t]][i];
            worst = worst.max((got - want).abs());
        }
    }
    if worst <= 1e-12 {
        Ok(format!("{queries} queries, max deviation {worst:e}"))
    } else {
        Err(format!("counterfactual shift deviates by {worst:e}"))
    }
}

pub fn metric_identities() -> Result<String, String> {
    let y = [1.5, -0.5, 2.0, 4.0];
    let perfect = metrics(&y, &y).map_err(|e| e.to_string())?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let null = metrics(&y, &[mean; 4]).map_err(|e| e.to_string())?;
    let hand = metrics(&[0.0, 0.0], &[3.0, 4.0]).map_err(|e| e.to_string())?;
    let ok = perfect.r2 == Some(1.0)
        && perfect.rmse == 0.0
        && perfect.mae == 0.0
        && null.r2.is_some_and(|r| r.abs() < 1e-12)
        && (hand.rmse - 12.5f64.sqrt()).abs() < 1e-12
        && (hand.mae - 3.5).abs() < 1e-12;
    if ok {
        Ok("perfect, mean and hand cases".into())
    } else {
        Err(format!("{perfect:?} {null:?} {hand:?}"))
    }
}

pub fn run_checks(seed: u64) -> Vec<CheckOutcome> {
    vec![
        outcome(
            "gradients",
            objective_grad_check(seed, DomainMode::Cmmd).map(|(e, n)| format!("{n} coordinates, max rel error {e:e}")),
        ),
        outcome(
            "discriminator_gradients",
            objective_grad_check(seed, DomainMode::Both).map(|(e, n)| format!("{n} coordinates, max rel error {e:e}")),
        ),
        outcome("domain_gap_bound", gap_bound_trials(seed, 100)),
        outcome("domain_loss_identity", domain_loss_identity(seed, 50)),
        outcome("attention_contracts", attention_contracts(seed, 1000)),
        outcome("simulator_oracles", simulator_oracles(seed, 1000)),
        outcome("metric_identities", metric_identities()),
    ]
}
