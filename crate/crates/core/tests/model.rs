mod common;

use common::*;
use gradkernel::Tape;
use lidda::journey::{Channel, Path};
use lidda::model::{fit, AttentionModel, CalibrationMode, Encoded, MmmTargets, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn assert_grads(report: &[(String, f64)]) {
    for (name, rel) in report {
        assert!(*rel < TOL, "{name}: relative error {rel:e}");
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut m = jittered_model(tiny_config(), 11);
    let batch = gradcheck_batch(&m, 12);
    assert_grads(&model_gradcheck(&mut m, &batch, None, 0.0, STEP));
}

#[test]
fn gradients_through_every_calibration_loss() {
    let a = [0.5, 0.3, 0.2];
    let pi = [0.4, 0.4, 0.2];
    for mode in [
        CalibrationMode::BatchMse,
        CalibrationMode::BatchKl,
        CalibrationMode::PathMse,
        CalibrationMode::PathKl,
    ] {
        let mut m = jittered_model(tiny_config(), 21);
        let batch = gradcheck_batch(&m, 22);
        let report = model_gradcheck(&mut m, &batch, Some((mode, &a, &pi)), 2.0, STEP);
        for (name, rel) in &report {
            assert!(*rel < TOL, "{mode:?} {name}: relative error {rel:e}");
        }
    }
}

#[test]
fn gradients_for_every_ablation() {
    use lidda::model::Ablation;
    for v in Ablation::ALL {
        let cfg = ModelConfig {
            ablation: v,
            ..tiny_config()
        };
        let mut m = jittered_model(cfg, 31);
        let batch = gradcheck_batch(&m, 32);
        assert_grads(&model_gradcheck(&mut m, &batch, None, 0.0, STEP));
    }
}

fn sample(n: usize, seed: u64) -> (AttentionModel, Vec<Path>) {
    let cfg = tiny_config();
    let m = AttentionModel::new(cfg.clone(), vocab()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let paths = (0..n)
        .map(|i| {
            let len = 1 + i % cfg.max_len;
            random_path(&mut rng, i as u64, len, &cfg, i % 3 == 0)
        })
        .collect();
    (m, paths)
}

#[test]
fn untrained_model_predicts_one_half() {
    let (m, paths) = sample(20, 1);
    for p in m.predict(&paths).unwrap() {
        assert_eq!(p, 0.5);
    }
}

#[test]
fn output_bias_moves_every_prediction_up() {
    let (mut m, paths) = sample(20, 2);
    let m0 = jittered_model(tiny_config(), 3);
    m.params = m0.params.clone();
    let before = m.predict(&paths).unwrap();
    let b2 = m.params.id("b_2").unwrap();
    m.params.get_mut(b2).data_mut()[0] += 1.0;
    let after = m.predict(&paths).unwrap();
    for (a, b) in after.iter().zip(&before) {
        assert!(a > b);
    }
}

#[test]
fn identical_paths_get_identical_outputs() {
    let m = jittered_model(tiny_config(), 4);
    let (_, paths) = sample(1, 5);
    let twice = vec![paths[0].clone(), paths[0].clone()];
    let p = m.predict(&twice).unwrap();
    assert_eq!(p[0], p[1]);
    let c = m.attention_credits(&m.encode_all(&twice).unwrap()).unwrap();
    assert_eq!(c[0], c[1]);
}

#[test]
fn single_touch_attends_to_itself() {
    let m = jittered_model(tiny_config(), 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let e = m.encode(&random_path(&mut rng, 0, 1, &m.config, true)).unwrap();
    let a = m.attention(&e).unwrap();
    let n = m.config.max_len;
    for h in 0..m.config.n_heads {
        assert!((a.data()[h * n * n] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn equal_scores_attend_uniformly() {
    let mut m = jittered_model(tiny_config(), 8);
    let wq = m.params.id("W_Q").unwrap();
    m.params.get_mut(wq).data_mut().fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let e = m.encode(&random_path(&mut rng, 0, 3, &m.config, true)).unwrap();
    let (_, mask) = m.assemble_inputs(&e).unwrap();
    assert_eq!(&mask[..3], &[0.0, 0.0, 0.0]);
    assert!(mask[3] < -1e8);
    let a = m.attention(&e).unwrap();
    let n = m.config.max_len;
    for h in 0..m.config.n_heads {
        for q in 0..3 {
            let row = &a.data()[(h * n + q) * n..(h * n + q + 1) * n];
            for &w in &row[..3] {
                assert!((w - 1.0 / 3.0).abs() < 1e-12);
            }
            assert!(row[3] < 1e-12);
        }
    }
}

#[test]
fn attention_rows_sum_to_one_and_padding_gets_nothing() {
    let m = jittered_model(tiny_config(), 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = m.config.max_len;
    for len in 1..=n {
        let e = m.encode(&random_path(&mut rng, len as u64, len, &m.config, true)).unwrap();
        let a = m.attention(&e).unwrap();
        for h in 0..m.config.n_heads {
            for q in 0..n {
                let row = &a.data()[(h * n + q) * n..(h * n + q + 1) * n];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for &w in &row[len..] {
                    assert!(w < 1e-12);
                }
            }
        }
    }
}

fn separable(n: usize, seed: u64) -> Vec<Path> {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut p = random_path(&mut rng, i as u64, 1 + i % cfg.max_len, &cfg, false);
            p.converted = p.touchpoints.iter().any(|t| t.channel == Channel::new("SEARCH"));
            p
        })
        .collect()
}

fn encoded(m: &AttentionModel, paths: &[Path]) -> Vec<Encoded> {
    m.encode_all(paths).unwrap()
}

#[test]
fn training_lowers_bce_and_is_deterministic() {
    let cfg = ModelConfig {
        lr: 0.01,
        batch_size: 32,
        epochs: 3,
        ..tiny_config()
    };
    let paths = separable(400, 13);
    let run = || {
        let mut m = AttentionModel::new(cfg.clone(), vocab()).unwrap();
        let enc = encoded(&m, &paths);
        let log = fit(&mut m, &enc, &enc[..100], None).unwrap();
        (m, log)
    };
    let (m1, log1) = run();
    let (m2, log2) = run();
    assert_eq!(log1, log2);
    assert_eq!(m1.params.get(m1.params.id("W_1").unwrap()), m2.params.get(m2.params.id("W_1").unwrap()));
    assert!(log1.epochs.last().unwrap().bce < log1.initial_bce);
    assert!(log1.epochs.last().unwrap().val_auc.unwrap() > 0.8);
}

#[test]
fn zero_beta_matches_plain_bce() {
    let cfg = ModelConfig {
        lr: 0.01,
        batch_size: 32,
        epochs: 2,
        ..tiny_config()
    };
    let paths = separable(200, 14);
    let targets = MmmTargets::new(vec![
        (Channel::new("EMAIL"), 0.2, 0.3),
        (Channel::new("FEED"), 0.2, 0.5),
        (Channel::new("SEARCH"), 0.6, 0.2),
    ])
    .unwrap();
    let mut plain = AttentionModel::new(cfg.clone(), vocab()).unwrap();
    let enc = encoded(&plain, &paths);
    let l0 = fit(&mut plain, &enc, &[], None).unwrap();
    let mut zero = AttentionModel::new(
        ModelConfig {
            calibration: CalibrationMode::BatchKl,
            beta: 0.0,
            ..cfg
        },
        vocab(),
    )
    .unwrap();
    let l1 = fit(&mut zero, &enc, &[], Some(&targets)).unwrap();
    for (a, b) in l0.epochs.iter().zip(&l1.epochs) {
        assert_eq!(a.bce, b.bce);
        assert_eq!(a.total, b.total);
        assert!(b.calibration > 0.0);
    }
    for (id, _, t) in plain.params.iter() {
        assert_eq!(t, zero.params.get(id));
    }
}

#[test]
fn fit_rejects_single_class() {
    let (mut m, mut paths) = sample(10, 15);
    paths.iter_mut().for_each(|p| p.converted = true);
    let enc = encoded(&m, &paths);
    assert!(fit(&mut m, &enc, &[], None).is_err());
    assert!(fit(&mut m, &[], &[], None).is_err());
}

#[test]
fn checkpoint_roundtrip() {
    let m = jittered_model(tiny_config(), 16);
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("m");
    m.save(&stem).unwrap();
    let back = AttentionModel::load(&stem).unwrap();
    let (_, paths) = sample(12, 17);
    assert_eq!(m.predict(&paths).unwrap(), back.predict(&paths).unwrap());
    assert_eq!(m.channels, back.channels);
}

#[test]
fn overlong_path_is_rejected() {
    let m = jittered_model(tiny_config(), 18);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let p = random_path(&mut rng, 0, 5, &m.config, true);
    assert!(m.encode(&p).is_err());
}

#[test]
fn batched_and_single_forward_agree() {
    let m = jittered_model(tiny_config(), 20);
    let (_, paths) = sample(9, 21);
    let enc = encoded(&m, &paths);
    let all = m.predict_encoded(&enc).unwrap();
    for (i, e) in enc.iter().enumerate() {
        let mut tape = Tape::new();
        let f = m.forward(&mut tape, &[e], None).unwrap();
        let p = gradkernel::sigmoid(tape.value(f.logits).data()[0]);
        assert!((p - all[i]).abs() < 1e-12);
    }
}
