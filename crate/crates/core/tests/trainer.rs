use std::fs;

use cda::dataset::{normalize, DomainDataset};
use cda::model::{CdaModel, Dims, ModelConfig};
use cda::scm::{make_domain_pair, DomainShift, DomainSizes, Policy, ScmSpec};
use cda::trainer::*;

fn data(source: usize, target: usize, shifted: bool) -> (DomainDataset, DomainDataset) {
    let shift = DomainShift {
        target_policy: shifted.then(|| Policy::Softmax {
            base_logits: vec![0.0, 1.5, -1.0, 0.5, 1.0],
            slope: vec![0.0, 0.5, 0.0, -0.3, 0.2],
        }),
        ..DomainShift::default()
    };
    let (s, t) = make_domain_pair(
        &ScmSpec::default(),
        &shift,
        &DomainSizes {
            source_episodes: source,
            target_episodes: target,
            length: 12,
        },
        23,
    )
    .unwrap();
    let (s, stats) = normalize(&s, None).unwrap();
    let (t, _) = normalize(&t, Some(&stats)).unwrap();
    (s, t)
}

fn model(src: &DomainDataset, seed: u64) -> CdaModel {
    let cfg = ModelConfig {
        d_h: 6,
        d_k: 3,
        window: 4,
        mu_hidden: 6,
        head_hidden: 6,
        disc_hidden: 4,
        ..ModelConfig::default()
    };
    CdaModel::new(
        cfg,
        Dims {
            d_x: src.d_x,
            k: src.k(),
            u_dim: src.u_dim,
        },
        seed,
    )
    .unwrap()
}

fn state(cfg: TrainConfig, s: &DomainDataset, t: &DomainDataset) -> TrainState {
    TrainState::new(cfg, model(s, 4), s, t).unwrap()
}

fn base() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 4,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic() {
    let (s, t) = data(10, 8, true);
    let cfg = TrainConfig {
        domain_mode: DomainMode::Both,
        ..base()
    };
    let a = train(state(cfg.clone(), &s, &t), &s, &t, &RunFiles::default()).unwrap();
    let b = train(state(cfg, &s, &t), &s, &t, &RunFiles::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.step, a.planned_steps());
    assert_eq!(a.history.len(), 6);
}

#[test]
fn zero_lambda_matches_detached_domain_terms() {
    let (s, t) = data(10, 8, true);
    let zero = TrainConfig { lambda: 0.0, ..base() };
    let detached = TrainConfig {
        detach_domain: true,
        ..base()
    };
    let a = train(state(zero, &s, &t), &s, &t, &RunFiles::default()).unwrap();
    let b = train(state(detached, &s, &t), &s, &t, &RunFiles::default()).unwrap();
    assert_eq!(a.model.params, b.model.params);
    let with_domain = train(state(base(), &s, &t), &s, &t, &RunFiles::default()).unwrap();
    assert_ne!(a.model.params, with_domain.model.params);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let (s, t) = data(10, 8, true);
    let dir = tempfile::tempdir().unwrap();
    let whole = train(state(base(), &s, &t), &s, &t, &RunFiles::default()).unwrap();
    let files = RunFiles::in_dir(dir.path());
    let mut st = state(base(), &s, &t);
    train_steps(&mut st, &s, &t, 2, &files, None).unwrap();
    st.save(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    let loaded = TrainState::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(loaded, st);
    let resumed = train(loaded, &s, &t, &files).unwrap();
    assert_eq!(resumed, whole);
    let log = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), whole.planned_steps());
}

#[test]
fn logged_losses_replay_from_checkpoints() {
    let (s, t) = data(10, 8, true);
    let cfg = TrainConfig {
        domain_mode: DomainMode::Both,
        ..base()
    };
    let mut st = state(cfg, &s, &t);
    let planned = st.planned_steps();
    let mut replayed = Vec::new();
    for stop in [0, planned / 2, planned - 1] {
        let n = stop - st.step;
        train_steps(&mut st, &s, &t, n, &RunFiles::default(), None).unwrap();
        let text = cda::checkpoint::to_string(&st).unwrap();
        let restored: TrainState = cda::checkpoint::from_str(&text).unwrap();
        replayed.push((stop, step_loss(&restored, &s, &t).unwrap()));
    }
    train_steps(&mut st, &s, &t, planned, &RunFiles::default(), None).unwrap();
    for (stop, loss) in replayed {
        let logged = &st.history[stop].loss;
        assert!((logged.total - loss.total).abs() < 1e-9, "step {stop}");
        assert!((logged.l_seq_target - loss.l_seq_target).abs() < 1e-9);
        assert!((logged.l_dom - loss.l_dom).abs() < 1e-9);
    }
}

#[test]
fn only_parameters_with_gradients_move() {
    let (s, t) = data(10, 8, true);
    let plain = TrainConfig {
        momentum: 0.0,
        clip_norm: None,
        domain_mode: DomainMode::Cmmd,
        ..base()
    };
    let mut st = state(plain.clone(), &s, &t);
    let before = st.model.params.clone();
    train_steps(&mut st, &s, &t, 1, &RunFiles::default(), None).unwrap();
    for (name, v) in before.iter() {
        let moved = st.model.params.get(name).unwrap() != v;
        assert_eq!(moved, !name.starts_with("disc."), "{name}");
    }

    let frozen = TrainConfig {
        freeze_generator: true,
        domain_mode: DomainMode::Discriminator,
        ..plain.clone()
    };
    let mut st = state(frozen, &s, &t);
    train_steps(&mut st, &s, &t, 1, &RunFiles::default(), None).unwrap();
    for (name, v) in before.iter() {
        let moved = st.model.params.get(name).unwrap() != v;
        assert_eq!(moved, name.starts_with("disc."), "{name}");
    }

    let frozen = TrainConfig {
        freeze_discriminator: true,
        domain_mode: DomainMode::Both,
        ..plain
    };
    let mut st = state(frozen, &s, &t);
    train_steps(&mut st, &s, &t, 1, &RunFiles::default(), None).unwrap();
    assert!(before.iter().filter(|(n, _)| n.starts_with("disc.")).all(|(n, v)| st.model.params.get(n).unwrap() == v));
}

#[test]
fn discriminator_learns_to_separate_domains() {
    let (s, t) = data(24, 24, true);
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 8,
        freeze_generator: true,
        domain_mode: DomainMode::Discriminator,
        lr_discriminator: 0.05,
        ..base()
    };
    let done = train(state(cfg, &s, &t), &s, &t, &RunFiles::default()).unwrap();
    let disc: Vec<f64> = done.history.iter().map(|r| r.loss.l_disc.unwrap()).collect();
    let head: f64 = disc[..9].iter().sum::<f64>() / 9.0;
    let tail: f64 = disc[disc.len() - 9..].iter().sum::<f64>() / 9.0;
    assert!(tail < head, "discriminator loss {head} -> {tail}");
    assert!(done.history.iter().all(|r| r.grad_norm_generator == 0.0));
}

#[test]
fn loss_decreases_on_a_small_problem() {
    let (s, t) = data(20, 20, false);
    let cfg = TrainConfig {
        epochs: 40,
        batch_size: 4,
        lambda: 0.0,
        ..base()
    };
    let done = train(state(cfg, &s, &t), &s, &t, &RunFiles::default()).unwrap();
    assert_eq!(done.history.len(), 200);
    let avg = |r: &[StepRecord]| r.iter().map(|x| x.loss.total).sum::<f64>() / r.len() as f64;
    let (head, tail) = (avg(&done.history[..20]), avg(&done.history[180..]));
    assert!(tail < 0.8 * head, "loss {head} -> {tail}");
}

#[test]
fn divergence_keeps_the_last_good_state() {
    let (s, t) = data(10, 8, true);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        lr_generator: 1e150,
        clip_norm: None,
        ..base()
    };
    let err = train(state(cfg, &s, &t), &s, &t, &RunFiles::in_dir(dir.path())).unwrap_err();
    let TrainError::Diverged { step, checkpoint } = err else {
        panic!("expected divergence, got {err}");
    };
    let path = checkpoint.unwrap();
    let kept = TrainState::load(&path).unwrap();
    assert_eq!(kept.step, step);
    assert!(kept.model.params.all_finite());
}

#[test]
fn corrupt_checkpoints_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    fs::write(&path, "NOT-A-CHECKPOINT\n{}\n").unwrap();
    let err = TrainState::load(&path).unwrap_err();
    assert!(err.to_string().contains("CDA-CKPT-1 expected"), "{err}");
    fs::write(&path, "CDA-CKPT-2\n{}\n").unwrap();
    assert!(TrainState::load(&path).unwrap_err().to_string().contains("version"));
    fs::write(&path, "CDA-CKPT-1\n{\"step\":\n").unwrap();
    assert!(TrainState::load(&path).is_err());
}

#[test]
fn data_must_match_the_state() {
    let (s, t) = data(10, 8, false);
    let mut st = state(base(), &s, &t);
    let fewer = s.with_episodes(s.episodes[..5].to_vec());
    assert!(matches!(
        train_steps(&mut st, &fewer, &t, 1, &RunFiles::default(), None),
        Err(TrainError::DataMismatch { .. })
    ));
    let empty = t.with_episodes(vec![]);
    assert!(TrainState::new(base(), model(&s, 0), &s, &empty).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        TrainConfig { epochs: 0, ..base() },
        TrainConfig { batch_size: 0, ..base() },
        TrainConfig { lr_generator: 0.0, ..base() },
        TrainConfig { lr_discriminator: f64::NAN, ..base() },
        TrainConfig { lambda: -1.0, ..base() },
        TrainConfig { warmup_fraction: 1.5, ..base() },
        TrainConfig { momentum: 1.0, ..base() },
        TrainConfig { clip_norm: Some(0.0), ..base() },
        TrainConfig { checkpoint_every: Some(0), ..base() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(TrainError::Config(_))), "{cfg:?}");
    }
    assert!(base().validate().is_ok());
}

#[test]
fn lambda_warms_up_linearly() {
    let (s, t) = data(10, 40, false);
    let cfg = TrainConfig {
        epochs: 2,
        warmup_fraction: 0.5,
        lambda: 2.0,
        ..base()
    };
    let st = state(cfg, &s, &t);
    assert_eq!(st.planned_steps(), 20);
    let lam: Vec<f64> = (0..20).map(|i| st.lambda_at(i)).collect();
    assert_eq!(lam[0], 0.2);
    assert_eq!(lam[9], 2.0);
    assert!(lam.windows(2).all(|w| w[0] <= w[1]));
}
