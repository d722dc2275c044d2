//! Memorization smoke tests on a fixed 64-example set.

use panotok::codec::synth_panorama;
use panotok::exec::Parallelism;
use panotok::model::{ModelConfig, TrainExample, Transformer};
use panotok::pipeline::{make_example, masked_accuracy, max_condition_len, LossKind, TrainConfig, Trainer};
use panotok::rng::Streams;
use panotok::sphere_grid::{GridSpec, PatchCoord};

const SET: usize = 64;

fn spec() -> GridSpec {
    GridSpec::new(3, 6, 8, 256).unwrap()
}

fn overfit_set(kind: LossKind) -> Vec<TrainExample> {
    let spec = spec();
    let streams = Streams::new(11);
    (0..SET)
        .map(|i| {
            let grid = synth_panorama(i as u64, &spec);
            let mut rng = streams.rng("overfit", &[i as u64]);
            let patch = PatchCoord::new(i % spec.rows, (i / spec.rows) % spec.cols);
            make_example(&grid, patch, kind, &[], &mut rng).unwrap()
        })
        .collect()
}

fn trainer(steps: u64, warmup: u64, peak_lr: f64) -> Trainer {
    let spec = spec();
    let mut cfg = ModelConfig::desk(spec.vocab, spec.width(), spec.height(), max_condition_len(spec.tokens_per_patch()));
    cfg.dropout = 0.0;
    cfg.pass1_rotary = panotok::rotary::RotaryVariant::Vanilla2d;
    let tc = TrainConfig {
        batch_size: SET,
        steps,
        warmup,
        peak_lr,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    Trainer::new(Transformer::init(cfg, 5).unwrap(), tc, Parallelism::available()).unwrap()
}

#[test]
fn loss_falls_below_a_tenth_of_uniform_within_200_steps() {
    let batch = overfit_set(LossKind::Lpm);
    let mut t = trainer(2000, 20, 1e-2);
    let batches = [(LossKind::Lpm, batch)];
    let first = t.apply(&batches).unwrap().loss;
    let mut last = first;
    while t.step < 200 {
        last = t.apply(&batches).unwrap().loss;
    }
    let bound = 0.1 * (256f64).ln();
    assert!(last < first, "loss did not decrease: {first} -> {last}");
    assert!(last < bound, "final loss {last} not below {bound}");
}

#[test]
fn masked_accuracy_exceeds_95_percent_within_2k_steps() {
    let batch = overfit_set(LossKind::Lpm);
    let mut t = trainer(2000, 20, 1e-2);
    let batches = [(LossKind::Lpm, batch)];
    let mut acc = 0.0;
    while t.step < 2000 {
        t.apply(&batches).unwrap();
        if t.step % 50 == 0 {
            acc = masked_accuracy(&t.model, &batches[0].1).unwrap();
            if acc > 0.95 {
                break;
            }
        }
    }
    assert!(acc > 0.95, "masked accuracy {acc} after {} steps", t.step);
}
