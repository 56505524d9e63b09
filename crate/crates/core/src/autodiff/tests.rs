use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn identity_matmul_is_noop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::<f64>::randn([3, 5], 1.0, &mut rng);
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::identity(3));
    let av = tape.constant(a.clone());
    let out = tape.matmul(i, av).unwrap();
    assert_eq!(tape.value(out), &a);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([1, 4]));
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.25; 4]);
}

#[test]
fn cross_entropy_against_uniform_is_log_classes() {
    let n = 660;
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::full([1, n], 1.0 / n as f64));
    let mut target = Tensor::zeros([1, n]);
    target.data_mut()[17] = 1.0;
    let ce = tape.cross_entropy_probs(p, &target).unwrap();
    assert!((tape.value(ce).item() - (660f64).ln()).abs() < 1e-12);
    assert!((tape.value(ce).item() - 6.49224).abs() < 1e-5);

    let logits = tape.constant(Tensor::zeros([2, n]));
    let ce = tape.cross_entropy_logits(logits, &[0, 659]).unwrap();
    assert!((tape.value(ce).item() - (660f64).ln()).abs() < 1e-12);
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]), true);
    let s = tape.sum(x).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
}

#[test]
fn mse_gradient_vanishes_at_minimum() {
    let x0 = t(&[2, 2], &[0.3, -1.0, 2.0, 4.0]);
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let target = tape.constant(x0);
    let l = tape.mse(x, target).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
    let g = tape.backward(l).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn shape_errors_name_the_op_and_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    let c = tape.constant(Tensor::zeros([3, 2]));
    let err = tape.add(a, c).unwrap_err().to_string();
    assert!(err.contains("add") && err.contains("[3, 2]"), "{err}");
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(Tensor::zeros([2, 2]), true);
    let b = tape.relu(a).unwrap();
    assert!(matches!(tape.backward(b), Err(Error::NonScalarLoss(_))));
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(t(&[1, 2], &[1e300, 1e300]), true);
    let b = tape.mul(a, a);
    assert!(matches!(b, Err(Error::NonFinite { op: "mul" })));
}

#[test]
fn cosine_rejects_zero_vectors() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(t(&[1, 3], &[0.0, 0.0, 0.0]), true);
    let b = tape.leaf(t(&[1, 3], &[1.0, 0.0, 0.0]), true);
    assert!(matches!(tape.cosine_rows(a, b), Err(Error::ZeroNorm { .. })));
}

#[test]
fn inference_tape_records_no_gradients() {
    let mut store = crate::optim::ParamStore::<f64>::new();
    store.insert("w", Tensor::ones([2, 2])).unwrap();
    let mut tape = Tape::inference();
    let w = tape.param(&store, "w").unwrap();
    assert!(!tape.requires_grad(w));
    let x = tape.constant(Tensor::ones([1, 2]));
    let y = tape.matmul(x, w).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.by_name("w").is_none());
}

#[test]
fn repeated_param_binds_share_a_leaf() {
    let mut store = crate::optim::ParamStore::<f64>::new();
    store.insert("w", t(&[1, 1], &[3.0])).unwrap();
    let mut tape = Tape::new();
    let a = tape.param(&store, "w").unwrap();
    let b = tape.param(&store, "w").unwrap();
    assert_eq!(a, b);
    let p = tape.mul(a, b).unwrap();
    let s = tape.sum(p).unwrap();
    let g = tape.backward(s).unwrap();
    // d(w²)/dw = 2w
    assert_eq!(g.by_name("w").unwrap().data(), &[6.0]);
}

fn loss_parts(x0: &Tensor<f64>, which: u8) -> Tensor<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone(), true);
    let s = tape.softmax(x).unwrap();
    let l1 = tape.sum(s).unwrap();
    let h = tape.tanh(x).unwrap();
    let h2 = tape.mul(h, h).unwrap();
    let l2 = tape.mean(h2).unwrap();
    let loss = match which {
        1 => tape.scale(l1, 3.0).unwrap(),
        2 => l2,
        _ => {
            let a = tape.scale(l1, 3.0).unwrap();
            tape.add(a, l2).unwrap()
        }
    };
    tape.backward(loss).unwrap().get(x).unwrap().clone()
}

#[test]
fn gradients_of_summed_losses_add() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0 = Tensor::<f64>::randn([3, 4], 1.0, &mut rng);
    let g1 = loss_parts(&x0, 1);
    let g2 = loss_parts(&x0, 2);
    let g12 = loss_parts(&x0, 0);
    for ((a, b), c) in g1.data().iter().zip(g2.data()).zip(g12.data()) {
        assert!((a + b - c).abs() < 1e-12);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Tensor::<f32>::randn([12, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let qv = tape.leaf(q, true);
        let a = tape.attention(qv, qv, qv, 2, 6, 6).unwrap();
        let s = tape.sum(a).unwrap();
        let val = tape.value(s).item();
        let g = tape.backward(s).unwrap().get(qv).unwrap().clone();
        (val.to_bits(), g.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn attention_rows_are_convex_combinations_of_values() {
    // with a single key every query returns exactly that value
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(t(&[3, 2], &[1.0, 2.0, -1.0, 0.5, 0.0, 0.0]));
    let kv = tape.constant(t(&[1, 2], &[4.0, -3.0]));
    let out = tape.attention(q, kv, kv, 1, 3, 1).unwrap();
    assert_eq!(tape.value(out).data(), &[4.0, -3.0, 4.0, -3.0, 4.0, -3.0]);
}
