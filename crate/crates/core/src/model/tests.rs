use std::path::Path;

use rand::Rng as _;

use super::*;
use crate::codec::{SemanticVector, View as SemView};
use crate::exec::Parallelism;
use crate::rng::Streams;
use crate::rotary::RotaryVariant;
use crate::sphere_grid::TokenCoord;

fn tiny() -> ModelConfig {
    ModelConfig {
        layers: 1,
        heads: 2,
        model_dim: 8,
        vocab: 7,
        max_cond: 8,
        sem_dim: 3,
        ffn_mult: 4,
        rotary: RotaryVariant::Sphere,
        pass1_rotary: RotaryVariant::Vanilla2d,
        dropout: 0.0,
        width: 6,
        height: 2,
    }
}

fn small() -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads: 2,
        model_dim: 16,
        vocab: 11,
        max_cond: 12,
        sem_dim: 4,
        ffn_mult: 2,
        rotary: RotaryVariant::Sphere,
        pass1_rotary: RotaryVariant::Sphere,
        dropout: 0.0,
        width: 12,
        height: 4,
    }
}

fn coords(pts: &[(i32, i32)]) -> Vec<TokenCoord> {
    pts.iter().map(|&(x, y)| TokenCoord::new(x, y)).collect()
}

fn cond(cfg: &ModelConfig, phase: Phase, seed: u64) -> ConditionSet {
    let mut rng = Streams::new(seed).rng("cond", &[]);
    ConditionSet {
        semantic: vec![SemanticVector {
            view: SemView::Back,
            values: (0..cfg.sem_dim).map(|_| rng.gen_range(-60.0..60.0)).collect(),
        }],
        tokens: (0..3).map(|_| rng.gen_range(0..cfg.vocab as u16)).collect(),
        coords: coords(&[(5, 0), (0, 1), (1, 1)]),
        phase,
    }
}

fn model<F: Scalar>(cfg: ModelConfig, seed: u64) -> Transformer<F> {
    let w = Weights::<f64>::init(&cfg, &mut Streams::new(seed).rng("init", &[]));
    // Larger weights than the defaults so every path carries signal.
    let mut w = w.cast::<f64>();
    for p in w.params_mut() {
        for v in &mut p.data {
            *v *= 4.0;
        }
    }
    Transformer::new(cfg, w.cast()).unwrap()
}

#[test]
fn logits_are_finite_and_rows_normalize() {
    let cfg = small();
    let m = model::<f64>(cfg, 1);
    let ids = [3u16, 11, 11, 4];
    let c = coords(&[(2, 1), (3, 1), (2, 2), (3, 2)]);
    let out = m.forward_masked(&ids, &c, &cond(&cfg, Phase::Pass2, 2)).unwrap();
    assert_eq!((out.rows, out.vocab), (4, cfg.vocab));
    for r in 0..out.rows {
        assert!(out.row(r).iter().all(|v| v.is_finite()));
        let s: f64 = out.probs(r, 1.0).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn permuting_masked_targets_permutes_rows() {
    let cfg = small();
    let m = model::<f64>(cfg, 3);
    let cs = cond(&cfg, Phase::Pass1, 4);
    let ids = [5u16, 11, 11, 2];
    let c = coords(&[(4, 0), (5, 0), (4, 1), (5, 1)]);
    let a = m.forward_masked(&ids, &c, &cs).unwrap();
    let ids_p = [5u16, 11, 11, 2];
    let c_p = coords(&[(4, 0), (4, 1), (5, 0), (5, 1)]);
    let b = m.forward_masked(&ids_p, &c_p, &cs).unwrap();
    for (x, y) in a.row(1).iter().zip(b.row(2)) {
        assert!((x - y).abs() < 1e-12);
    }
    for (x, y) in a.row(2).iter().zip(b.row(1)) {
        assert!((x - y).abs() < 1e-12);
    }
    // Different coordinates for the masked slots must matter.
    assert!(a.row(1).iter().zip(a.row(2)).any(|(x, y)| (x - y).abs() > 1e-6));
}

#[test]
fn phase_changes_logits_when_conditions_exist() {
    let cfg = small();
    let m = model::<f64>(cfg, 5);
    let ids = [11u16; 4];
    let c = coords(&[(2, 1), (3, 1), (2, 2), (3, 2)]);
    let p1 = m.forward_masked(&ids, &c, &cond(&cfg, Phase::Pass1, 6)).unwrap();
    let p2 = m.forward_masked(&ids, &c, &cond(&cfg, Phase::Pass2, 6)).unwrap();
    assert!(p1.data.iter().zip(&p2.data).any(|(a, b)| (a - b).abs() > 1e-6));
}

#[test]
fn ar_start_distribution_ignores_position() {
    let cfg = small();
    let m = model::<f64>(cfg, 7);
    let empty = ConditionSet::empty(Phase::Pass1);
    let a = m.forward_ar(&[], &coords(&[(0, 0)]), &empty).unwrap();
    let b = m.forward_ar(&[], &coords(&[(7, 3)]), &empty).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn ar_is_causal_and_matches_masked_trunk() {
    let cfg = small();
    let m = model::<f64>(cfg, 8);
    let cs = cond(&cfg, Phase::Pass1, 9);
    let toks = [1u16, 4, 9, 0];
    let c = coords(&[(2, 1), (3, 1), (2, 2), (3, 2)]);
    let full = Transformer::<f64>::shifted_inputs(cfg.vocab as u16, &toks[..3]);
    let trunk = m.forward(&full, &c, &cs, AttnMode::Causal).unwrap();
    for t in 0..=3 {
        let ar = m.forward_ar(&toks[..t], &c[..t + 1], &cs).unwrap();
        for (x, y) in ar.iter().zip(trunk.row(t)) {
            assert!((x - y).abs() < 1e-6);
        }
    }
    // Appending a later token leaves earlier rows unchanged.
    let shorter = m.forward(&full[..2], &c[..2], &cs, AttnMode::Causal).unwrap();
    for r in 0..2 {
        assert_eq!(shorter.row(r), trunk.row(r));
    }
}

#[test]
fn translating_all_coordinates_keeps_logits() {
    for variant in [RotaryVariant::Sphere, RotaryVariant::Vanilla2d] {
        let mut cfg = small();
        cfg.rotary = variant;
        let m = model::<f64>(cfg, 10);
        // Semantic keys sit at the origin, so only positioned tokens here.
        let cs = ConditionSet {
            semantic: Vec::new(),
            ..cond(&cfg, Phase::Pass2, 11)
        };
        let ids = [3u16, 11, 11, 4];
        let c = coords(&[(10, 1), (11, 1), (10, 2), (11, 2)]);
        let base = m.forward_masked(&ids, &c, &cs).unwrap();
        let (dx, dy) = (5, -1);
        let mut moved = cs.clone();
        moved.coords = cs.coords.iter().map(|p| p.shifted(dx, dy)).collect();
        let c2: Vec<_> = c.iter().map(|p| p.shifted(dx, dy)).collect();
        let out = m.forward_masked(&ids, &c2, &moved).unwrap();
        for (a, b) in base.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-5, "{variant:?}");
        }
    }
}

#[test]
fn same_inputs_give_identical_bits() {
    let cfg = small();
    let a = model::<f64>(cfg, 12);
    let b = model::<f64>(cfg, 12);
    let cs = cond(&cfg, Phase::Pass2, 1);
    let ids = [11u16, 2, 11, 5];
    let c = coords(&[(0, 0), (1, 0), (0, 1), (1, 1)]);
    let x = a.forward_masked(&ids, &c, &cs).unwrap();
    let y = b.forward_masked(&ids, &c, &cs).unwrap();
    assert_eq!(x, y);
}

#[test]
fn input_errors() {
    let cfg = small();
    let m = model::<f64>(cfg, 1);
    let e = ConditionSet::empty(Phase::Pass1);
    assert!(matches!(m.forward_masked(&[1, 2], &coords(&[(0, 0)]), &e), Err(crate::Error::Shape(_))));
    assert!(matches!(
        m.forward_masked(&[12], &coords(&[(0, 0)]), &e),
        Err(crate::Error::VocabMismatch { .. })
    ));
    let mut big = cond(&cfg, Phase::Pass1, 1);
    big.tokens = vec![0; 20];
    big.coords = vec![TokenCoord::new(0, 0); 20];
    assert!(m.forward_masked(&[1], &coords(&[(0, 0)]), &big).is_err());
    let mut nan = cond(&cfg, Phase::Pass1, 1);
    nan.semantic[0].values[0] = f64::NAN;
    assert!(matches!(
        m.forward_masked(&[1], &coords(&[(0, 0)]), &nan),
        Err(crate::Error::NonFinite(_))
    ));
}

fn batch(cfg: &ModelConfig) -> Vec<TrainExample> {
    let m = cfg.vocab as u16;
    let c = coords(&[(2, 0), (3, 0), (2, 1), (3, 1)]);
    vec![
        TrainExample {
            ids: vec![1, m, m, 6],
            coords: c.clone(),
            cond: cond(cfg, Phase::Pass1, 20),
            labels: vec![None, Some(3), Some(5), None],
            mode: AttnMode::Bidirectional,
        },
        TrainExample {
            ids: vec![m, m, 0, m],
            coords: c.clone(),
            cond: cond(cfg, Phase::Pass2, 21),
            labels: vec![Some(2), Some(2), None, Some(6)],
            mode: AttnMode::Bidirectional,
        },
        TrainExample {
            ids: vec![m, 4, 1, 2],
            coords: c,
            cond: ConditionSet {
                semantic: Vec::new(),
                ..cond(cfg, Phase::Pass1, 22)
            },
            labels: vec![Some(4), Some(1), Some(2), Some(0)],
            mode: AttnMode::Causal,
        },
    ]
}

fn finite_difference_check(dropout: bool) {
    let mut cfg = tiny();
    if dropout {
        cfg.dropout = 0.1;
    }
    let m = model::<f64>(cfg, 30);
    let b = batch(&cfg);
    let streams = dropout.then(|| Streams::new(31));
    let eval = |w: &Weights<f64>| {
        let t = Transformer::new(cfg, w.clone()).unwrap();
        t.gradients(&b, streams, Parallelism::Sequential).unwrap().0
    };
    let (_, grad) = m.gradients(&b, streams, Parallelism::Sequential).unwrap();
    let eps = 1e-4;
    let mut w = m.weights.clone();
    let names: Vec<String> = grad.named().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Vec<f64>> = grad.named().into_iter().map(|(_, p)| p.data.clone()).collect();
    let mut worst = (0.0, String::new());
    for (pi, name) in names.iter().enumerate() {
        for k in 0..grads[pi].len() {
            let orig = w.params_mut()[pi].data[k];
            w.params_mut()[pi].data[k] = orig + eps;
            let up = eval(&w);
            w.params_mut()[pi].data[k] = orig - eps;
            let down = eval(&w);
            w.params_mut()[pi].data[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads[pi][k];
            // Floor keeps round-off on vanishing entries from dominating.
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{k}]: analytic {analytic} numeric {numeric}"));
            }
        }
    }
    assert!(worst.0 <= 1e-4, "worst relative error {} at {}", worst.0, worst.1);
}

#[test]
fn gradients_match_finite_differences() {
    finite_difference_check(false);
}

#[test]
fn gradients_match_finite_differences_with_dropout() {
    finite_difference_check(true);
}

#[test]
fn unused_phase_row_gets_zero_gradient() {
    let cfg = tiny();
    let m = model::<f64>(cfg, 40);
    let b: Vec<_> = batch(&cfg)
        .into_iter()
        .filter(|e| e.cond.phase == Phase::Pass1)
        .collect();
    let (_, g) = m.gradients(&b, None, Parallelism::Sequential).unwrap();
    assert!(g.phase_emb.row(1).iter().all(|&v| v == 0.0));
    assert!(g.phase_emb.row(0).iter().any(|&v| v != 0.0));
    assert!(g.sq_norm().is_finite());
}

#[test]
fn parallel_and_sequential_gradients_agree_bitwise() {
    let cfg = tiny();
    let m = model::<f32>(cfg, 41);
    let b = batch(&cfg);
    let s = Some(Streams::new(3));
    let (la, ga) = m.gradients(&b, s, Parallelism::Sequential).unwrap();
    let (lb, gb) = m.gradients(&b, s, Parallelism::available()).unwrap();
    assert_eq!(la.to_bits(), lb.to_bits());
    assert_eq!(ga, gb);
}

#[test]
fn uniform_logits_cost_ln_v() {
    let cfg = tiny();
    let mut m = model::<f64>(cfg, 42);
    m.weights.out_w.data.fill(0.0);
    m.weights.out_b.data.fill(0.0);
    let loss = m.loss(&batch(&cfg)).unwrap();
    assert!((loss - (cfg.vocab as f64).ln()).abs() < 1e-12);
}

#[test]
fn confident_correct_logits_cost_nothing() {
    let cfg = tiny();
    let mut m = model::<f64>(cfg, 43);
    m.weights.out_w.data.fill(0.0);
    m.weights.out_b.data.fill(0.0);
    m.weights.out_b.data[3] = 60.0;
    let ex = TrainExample {
        labels: vec![Some(3), None, Some(3), Some(3)],
        ..batch(&cfg).remove(0)
    };
    assert!(m.loss(&[ex]).unwrap() < 1e-20);
}

#[test]
fn empty_supervision_is_rejected() {
    let cfg = tiny();
    let m = model::<f64>(cfg, 44);
    let ex = TrainExample {
        labels: vec![None; 4],
        ..batch(&cfg).remove(0)
    };
    assert!(matches!(m.loss(&[ex]), Err(crate::Error::Empty(_))));
    assert!(m.loss(&[]).is_err());
}

fn sample_checkpoint() -> Checkpoint {
    let cfg = ModelConfig {
        dropout: 0.1,
        ..small()
    };
    let w = Weights::<f32>::init(&cfg, &mut Streams::new(5).rng("init", &[]));
    let mut ck = Checkpoint::new(
        cfg,
        CheckpointFlags {
            sc_trained: true,
            semantic: false,
            arm_trained: true,
        },
        w.clone(),
    );
    ck.step = 70_000_000_123;
    let mut m = w.clone();
    m.scale(0.5);
    let mut v = w;
    v.scale(0.25);
    ck.adam = Some((m, v));
    ck.extra.insert("codec.feature_mean".into(), vec![127.25]);
    ck
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ck = sample_checkpoint();
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    assert_eq!(&std::fs::read(&path).unwrap()[..6], CKPT_MAGIC);
    assert!(!path.with_extension("lock").exists());

    let plain = Checkpoint::new(ck.config, CheckpointFlags::default(), ck.weights.clone());
    let bytes = plain.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
    assert_eq!(back, plain);
}

#[test]
fn checkpoint_rejects_damage_and_mismatch() {
    let ck = sample_checkpoint();
    let bytes = ck.to_bytes().unwrap();
    let p = Path::new("x");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(crate::Error::BadHeader { .. })));
    assert!(Checkpoint::from_bytes(&bytes[..20], p).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());

    let mut other = ck.config;
    other.model_dim = 32;
    assert!(matches!(ck.check_config(&other), Err(crate::Error::CheckpointMismatch(_))));
    assert!(ck.check_config(&ck.config).is_ok());
}

#[test]
fn checkpoint_write_fails_while_locked() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    std::fs::write(path.with_extension("lock"), b"1").unwrap();
    assert!(save_checkpoint(&path, &sample_checkpoint()).is_err());
    assert!(!path.exists());
}

#[test]
fn semantic_conditions_pin_absolute_position() {
    let cfg = small();
    let m = model::<f64>(cfg, 13);
    let cs = cond(&cfg, Phase::Pass2, 14);
    let ids = [3u16, 11, 11, 4];
    let c = coords(&[(10, 1), (11, 1), (10, 2), (11, 2)]);
    let base = m.forward_masked(&ids, &c, &cs).unwrap();
    let mut moved = cs.clone();
    moved.coords = cs.coords.iter().map(|p| p.shifted(3, 0)).collect();
    let c2: Vec<_> = c.iter().map(|p| p.shifted(3, 0)).collect();
    let out = m.forward_masked(&ids, &c2, &moved).unwrap();
    assert!(base.data.iter().zip(&out.data).any(|(a, b)| (a - b).abs() > 1e-6));
}

#[test]
fn prepared_conditions_match_direct_forward() {
    let cfg = small();
    let m = model::<f32>(cfg, 15);
    let cs = cond(&cfg, Phase::Pass2, 16);
    let mem = m.prepare(&cs).unwrap();
    let c = coords(&[(10, 1), (11, 1), (10, 2), (11, 2)]);
    for ids in [[11u16; 4], [1, 11, 3, 11]] {
        let a = m.forward_masked(&ids, &c, &cs).unwrap();
        let b = m.forward_prepared(&ids, &c, &mem, AttnMode::Bidirectional).unwrap();
        assert_eq!(a, b);
    }
}
