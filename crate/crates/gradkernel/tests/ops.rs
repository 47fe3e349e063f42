use gradkernel::{checkpoint, init, KernelError, ParamStore, Tape, Tensor, MASK_VALUE};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn softmax_of(row: &[f64], mask: Option<&[f64]>) -> Vec<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(row.to_vec())).unwrap();
    let m = mask.map(|m| Tensor::vector(m.to_vec()));
    let y = tape.softmax(x, m.as_ref()).unwrap();
    tape.value(y).data().to_vec()
}

#[test]
fn softmax_uniform() {
    let y = softmax_of(&[0.0, 0.0, 0.0], None);
    for v in y {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_mask_kills_position() {
    let y = softmax_of(&[5.0, 5.0, 5.0], Some(&[0.0, MASK_VALUE, 0.0]));
    assert!((y[0] - 0.5).abs() < 1e-9);
    assert!(y[1] < 1e-30);
    assert!((y[2] - 0.5).abs() < 1e-9);
}

#[test]
fn softmax_rejects_bad_mask() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let m = Tensor::vector(vec![0.0, -3.0]);
    assert!(tape.softmax(x, Some(&m)).is_err());
}

#[test]
fn bce_half_is_ln2() {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::scalar(0.5)).unwrap();
    let l = tape.bce(p, &[1.0]).unwrap();
    assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn mean_gradient_is_uniform() {
    let mut store = ParamStore::new();
    let id = store.add("x", Tensor::vector(vec![1.0, -2.0, 3.0, 0.5])).unwrap();
    let unused = store.add("unused", Tensor::zeros(&[2, 2])).unwrap();
    let mut tape = Tape::new();
    let x = tape.param(&store, id).unwrap();
    let m = tape.mean(x).unwrap();
    let g = tape.backward(m, &store).unwrap();
    assert_eq!(g.param(id).data(), &[0.25; 4]);
    assert_eq!(g.param(unused).data(), &[0.0; 4]);
}

#[test]
fn masked_softmax_position_gets_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::vector(vec![0.3, 1.2, -0.4])).unwrap();
    let mask = Tensor::vector(vec![0.0, 0.0, MASK_VALUE]);
    let y = tape.softmax(x, Some(&mask)).unwrap();
    let w = tape.constant(Tensor::vector(vec![1.0, -2.0, 5.0])).unwrap();
    let p = tape.mul(y, w).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s, &ParamStore::new()).unwrap();
    assert_eq!(g.wrt(x).unwrap().data()[2], 0.0);
}

#[test]
fn softmax_row_gradient_sums_to_zero_under_uniform_upstream() {
    let mut tape = Tape::new();
    let x = tape.variable(Tensor::new(vec![2, 3], vec![0.1, 2.0, -1.0, 0.5, 0.5, 3.0]).unwrap()).unwrap();
    let y = tape.softmax(x, None).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s, &ParamStore::new()).unwrap();
    for row in g.wrt(x).unwrap().data().chunks(3) {
        assert!(row.iter().sum::<f64>().abs() < 1e-9);
    }
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = tape.constant(Tensor::zeros(&[4, 2])).unwrap();
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn non_finite_input_rejected() {
    let mut tape = Tape::new();
    let r = tape.constant(Tensor::vector(vec![1.0, f64::NAN]));
    assert!(matches!(r, Err(KernelError::NonFinite { .. })));
}

#[test]
fn backward_before_forward_errors() {
    let mut other = Tape::new();
    let v = other.constant(Tensor::scalar(1.0)).unwrap();
    let empty = Tape::new();
    assert!(matches!(empty.backward(v, &ParamStore::new()), Err(KernelError::NoForward)));
}

#[test]
fn gather_out_of_range() {
    let mut tape = Tape::new();
    let t = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
    assert!(matches!(
        tape.gather(t, &[Some(3)]),
        Err(KernelError::IndexOutOfRange { index: 3, len: 3 })
    ));
}

#[test]
fn checkpoint_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    store.add("w", init::xavier_uniform(3, 4, &mut rng)).unwrap();
    store.add("emb", init::normal_table(5, 2, 0.02, &mut rng)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("model");
    checkpoint::save(&store, &stem, serde_json::json!({"note": "x"})).unwrap();
    let (back, meta) = checkpoint::load(&stem).unwrap();
    assert_eq!(back, store);
    assert_eq!(meta["note"], "x");
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(stem.with_extension("json")).unwrap()).unwrap();
    assert_eq!(manifest["tensors"][1]["offset"], 12);
}

#[test]
fn identical_inputs_give_identical_losses() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let w = store.add("w", init::xavier_uniform(4, 3, &mut rng)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(init::normal_table(6, 4, 1.0, &mut rng)).unwrap();
        let wv = tape.param(&store, w).unwrap();
        let h = tape.matmul(x, wv).unwrap();
        let s = tape.softmax(h, None).unwrap();
        let m = tape.mean(s).unwrap();
        tape.value(m).item().to_bits()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12), masked in 0usize..4) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 4], vals).unwrap()).unwrap();
        let mut mask = Tensor::zeros(&[3, 4]);
        for r in 0..3 {
            for c in 0..masked.min(3) {
                mask.data_mut()[r * 4 + c] = MASK_VALUE;
            }
        }
        let y = tape.softmax(x, Some(&mask)).unwrap();
        for row in tape.value(y).data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
