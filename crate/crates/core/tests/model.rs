use cda::dataset::{DomainTag, Episode};
use cda::model::*;
use cda::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIMS: Dims = Dims { d_x: 3, k: 4, u_dim: 2 };

fn config() -> ModelConfig {
    ModelConfig {
        d_h: 6,
        d_k: 3,
        window: 4,
        mu_hidden: 5,
        head_hidden: 5,
        disc_hidden: 4,
        ..ModelConfig::default()
    }
}

fn episode(seed: u64, len: usize) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Episode {
        id: format!("e{seed}"),
        start_month: 0,
        x: (0..len).map(|_| (0..DIMS.d_x).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        z: (0..len).map(|_| rng.random_range(0..DIMS.k)).collect(),
        y: (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
        u: (0..DIMS.u_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        noise: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn encoder_is_causal(seed in any::<u64>(), cut in 1usize..9, gru in any::<bool>()) {
        let cfg = ModelConfig { cell: if gru { CellKind::Gru } else { CellKind::Tanh }, ..config() };
        let m = CdaModel::new(cfg, DIMS, seed).unwrap();
        let e = episode(seed, 10);
        let mut p = e.clone();
        for t in cut..10 {
            p.x[t] = vec![9.0; DIMS.d_x];
            p.y[t] = -9.0;
            p.z[t] = (p.z[t] + 1) % DIMS.k;
        }
        let (a, b) = (m.encode(&e, DomainTag::Source).unwrap(), m.encode(&p, DomainTag::Source).unwrap());
        prop_assert_eq!(&a.h[..cut], &b.h[..cut]);
        prop_assert_ne!(&a.h[cut..], &b.h[cut..]);
        let (aa, ab) = (m.attention_map(&e, DomainTag::Source).unwrap(), m.attention_map(&p, DomainTag::Source).unwrap());
        prop_assert_eq!(&aa.r[..cut], &ab.r[..cut]);
    }

    #[test]
    fn attention_rows_are_stochastic_and_past_only(seed in any::<u64>(), len in 2usize..12) {
        let m = CdaModel::new(config(), DIMS, seed).unwrap();
        let map = m.attention_map(&episode(seed ^ 1, len), DomainTag::Target).unwrap();
        for (t, row) in map.alpha.iter().enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!(row[t + 1..].iter().all(|&v| v == 0.0));
            let start = (t + 1).saturating_sub(m.config.window);
            prop_assert!(row[..start].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn cate_hat_is_antisymmetric(seed in any::<u64>(), z in 0usize..4, z_ref in 0usize..4) {
        let m = CdaModel::new(config(), DIMS, seed).unwrap();
        let h: Vec<f64> = m.encode(&episode(seed, 5), DomainTag::Source).unwrap().h[3].clone();
        let a = m.cate_hat(&h, z, z_ref, DomainTag::Source).unwrap();
        let b = m.cate_hat(&h, z_ref, z, DomainTag::Source).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(*x, -*y);
        }
        if z == z_ref {
            prop_assert!(a.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn shared_module_ignores_domain_tag(seed in any::<u64>()) {
        let m = CdaModel::new(config(), DIMS, seed).unwrap();
        let e = episode(seed, 8);
        let (s, t) = (m.attention_map(&e, DomainTag::Source).unwrap(), m.attention_map(&e, DomainTag::Target).unwrap());
        prop_assert_eq!(s, t);
        let (ys, yt) = (m.predict_teacher_forced(&e, DomainTag::Source).unwrap(), m.predict_teacher_forced(&e, DomainTag::Target).unwrap());
        prop_assert_ne!(ys, yt);
    }

    #[test]
    fn forecast_lengths_match_horizon(seed in any::<u64>(), hist in 1usize..8, tau in 0usize..6) {
        let m = CdaModel::new(config(), DIMS, seed).unwrap();
        let e = episode(seed, hist);
        let zs: Vec<usize> = (0..tau).map(|i| i % DIMS.k).collect();
        let f = m.forecast(&e, &zs, DomainTag::Target, XSource::Rollout).unwrap();
        prop_assert_eq!(f.y_hat.len(), tau);
        prop_assert_eq!(f.x_hat.len(), tau);
        prop_assert!(f.y_hat.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn changing_the_treatment_moves_attention() {
    let m = CdaModel::new(config(), DIMS, 3).unwrap();
    let e = episode(3, 8);
    let base = m.attention_map(&e, DomainTag::Source).unwrap();
    let mut moved = 0;
    for z in 0..DIMS.k {
        if z == e.z[6] {
            continue;
        }
        let mut p = e.clone();
        p.z[6] = z;
        if m.attention_map(&p, DomainTag::Source).unwrap().alpha[7] != base.alpha[7] {
            moved += 1;
        }
    }
    assert_eq!(moved, DIMS.k - 1);
}

#[test]
fn zeroed_treatment_pathways_make_forecasts_treatment_invariant() {
    let cfg = ModelConfig {
        zero_treatment_pathways: true,
        ..config()
    };
    let m = CdaModel::new(cfg, DIMS, 5).unwrap();
    let e = episode(5, 6);
    let a = m.forecast(&e, &[1, 1, 1, 1], DomainTag::Target, XSource::Rollout).unwrap();
    let b = m.forecast(&e, &[3, 0, 2, 1], DomainTag::Target, XSource::Rollout).unwrap();
    assert_eq!(a, b);
    let full = CdaModel::new(config(), DIMS, 5).unwrap();
    let a = full.forecast(&e, &[1, 1, 1, 1], DomainTag::Target, XSource::Rollout).unwrap();
    let b = full.forecast(&e, &[3, 0, 2, 1], DomainTag::Target, XSource::Rollout).unwrap();
    assert_ne!(a.y_hat, b.y_hat);
}

#[test]
fn observed_feed_uses_supplied_covariates() {
    let m = CdaModel::new(config(), DIMS, 6).unwrap();
    let full = episode(6, 9);
    let hist = full.slice(0, 6);
    let future: Vec<Vec<f64>> = full.x[6..].to_vec();
    let f = m
        .forecast(&hist, &full.z[5..8], DomainTag::Source, XSource::Observed(&future))
        .unwrap();
    assert_eq!(f.y_hat.len(), 3);
    assert!(m
        .forecast(&hist, &full.z[5..8], DomainTag::Source, XSource::Observed(&future[..1]))
        .is_err());
}

#[test]
fn answer_and_key_share_width() {
    let m = CdaModel::new(config(), DIMS, 7).unwrap();
    let h = vec![0.1; m.config.d_h];
    let ak = m.answer_key(&h, 2, DomainTag::Source).unwrap();
    assert_eq!(ak.a.len(), m.config.d_k);
    assert_eq!(ak.k.len(), m.config.d_k);
    let zero = m.answer_key(&h, 0, DomainTag::Source).unwrap();
    let b_k = m.params.get("gen.attn.b_k").unwrap().data().to_vec();
    assert_eq!(zero.k, b_k);
}

#[test]
fn zero_final_layer_gives_even_odds() {
    let mut m = CdaModel::new(config(), DIMS, 8).unwrap();
    *m.params.get_mut("disc.w2").unwrap() = Tensor::zeros(m.config.disc_hidden, 1);
    *m.params.get_mut("disc.b2").unwrap() = Tensor::zeros(1, 1);
    assert_eq!(m.discriminate(&[0.3, -2.0, 5.0]).unwrap(), 0.5);
}

#[test]
fn separate_generators_split_parameters() {
    let cfg = ModelConfig {
        separate_generators: true,
        ..config()
    };
    let m = CdaModel::new(cfg, DIMS, 9).unwrap();
    assert!(m.params.contains("gen_s.enc.w_z") && m.params.contains("gen_t.enc.w_z"));
    let e = episode(9, 6);
    let s = m.encode(&e, DomainTag::Source).unwrap();
    let t = m.encode(&e, DomainTag::Target).unwrap();
    assert_ne!(s, t);
}

#[test]
fn bad_inputs_are_rejected() {
    assert!(CdaModel::new(ModelConfig { d_h: 0, ..config() }, DIMS, 0).is_err());
    assert!(CdaModel::new(config(), Dims { d_x: 3, k: 1, u_dim: 0 }, 0).is_err());
    let m = CdaModel::new(config(), DIMS, 0).unwrap();
    assert!(m.mu(&[0.0; 2], 0, DomainTag::Source).is_err());
    assert!(m.mu(&[0.0; 6], 9, DomainTag::Source).is_err());
    let mut e = episode(0, 4);
    e.z[1] = 7;
    assert!(m.encode(&e, DomainTag::Source).is_err());
}

#[test]
fn construction_is_seeded() {
    let a = CdaModel::new(config(), DIMS, 11).unwrap();
    let b = CdaModel::new(config(), DIMS, 11).unwrap();
    let c = CdaModel::new(config(), DIMS, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let bound = 1.0 / (a.encoder_input_dim() as f64).sqrt();
    let w = a.params.get("gen.enc.w_z").unwrap();
    assert!(w.data().iter().all(|v| v.abs() <= bound));
}
