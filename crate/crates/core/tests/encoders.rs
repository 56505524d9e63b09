use brainvis_core::align::si_loss;
use brainvis_core::autodiff::Tape;
use brainvis_core::data::{
    generate_synthetic, reassemble, segment_units, split_by_image, EegRecord, SyntheticGenSpec, DEFAULT_RATIOS,
};
use brainvis_core::fft::{dft_naive, fft_real, FftPlan};
use brainvis_core::freq::{fft_magnitude, FreqEncoder};
use brainvis_core::lmm::{batch_plans, ema_update, make_mask_plan, LmmConfig, LmmModel};
use brainvis_core::optim::ParamStore;
use brainvis_core::Tensor;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn lmm_cfg() -> LmmConfig {
    LmmConfig {
        n_units: 6,
        unit_dim: 4,
        d: 8,
        heads: 2,
        ffn: 16,
        sa_blocks: 1,
        ca_blocks: 1,
        n_t: 7,
        mask_ratio: 0.5,
        tau: 0.9,
    }
}

fn si(c_eeg: &[f64], c_cap: &[f64], c_label: &[f64], lambda: f64) -> f64 {
    let e = c_eeg.len();
    let mut tape = Tape::<f64>::inference();
    let a = tape.constant(Tensor::new([1, e], c_eeg.to_vec()).unwrap());
    let b = tape.constant(Tensor::new([1, e], c_cap.to_vec()).unwrap());
    let c = tape.constant(Tensor::new([1, e], c_label.to_vec()).unwrap());
    let l = si_loss(&mut tape, a, b, c, lambda).unwrap();
    tape.value(l).item()
}

fn unit3() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1f64..1.0, 3).prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_plans_partition_the_units(n in 2usize..200, r_m in 0.01f64..0.99, seed in any::<u64>()) {
        let k = (n as f64 * r_m).floor() as usize;
        let plan = make_mask_plan(n, r_m, &mut rng(seed));
        if k == 0 || k >= n {
            prop_assert!(plan.is_err());
            return Ok(());
        }
        let plan = plan.unwrap();
        prop_assert_eq!(plan.masked.len(), k);
        prop_assert_eq!(plan.visible.len(), n - k);
        let mut all: Vec<usize> = plan.masked.iter().chain(&plan.visible).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn batch_plans_are_reproducible(seed in any::<u64>(), epoch in 0usize..50, batch in 0usize..50) {
        let a = batch_plans(20, 0.75, 4, seed, epoch, batch).unwrap();
        prop_assert_eq!(&a, &batch_plans(20, 0.75, 4, seed, epoch, batch).unwrap());
        prop_assert_ne!(a, batch_plans(20, 0.75, 4, seed, epoch + 1, batch).unwrap());
    }

    #[test]
    fn ema_with_dyadic_rate_matches_the_closed_form(t0 in prop::collection::vec(-1e3f64..1e3, 1..8), shift in 1u32..4) {
        let tau = 0.5f64.powi(shift as i32);
        let w = Tensor::zeros([t0.len()]);
        let mut teacher = Tensor::new([t0.len()], t0.clone()).unwrap();
        for k in 1..=100 {
            ema_update(&mut teacher, &w, tau).unwrap();
            let closed: Vec<f64> = t0.iter().map(|&v| 0.0 + tau.powi(k) * (v - 0.0)).collect();
            prop_assert_eq!(teacher.data(), &closed[..]);
        }
    }

    #[test]
    fn segmentation_round_trips(c in 1usize..5, u in 1usize..6, n in 1usize..8, seed in any::<u64>()) {
        let l = u * n;
        let x: Vec<f32> = Tensor::<f32>::randn([c * l], 1.0, &mut rng(seed)).data().to_vec();
        let units = segment_units(&x, c, l, n).unwrap();
        prop_assert_eq!(units.len(), n);
        prop_assert!(units.iter().all(|v| v.len() == c * u));
        prop_assert_eq!(reassemble(&units, c).unwrap(), x);
    }

    #[test]
    fn splits_keep_images_together(k in 4usize..9, rpc in 3usize..8, ipc in 3usize..6, seed in any::<u64>()) {
        let ipc = ipc.min(rpc);
        let spec = SyntheticGenSpec::separable(k, rpc, ipc, 2, 16, 100.0, 0.1, seed).unwrap();
        let recs = generate_synthetic(&spec).unwrap();
        let split = split_by_image(&recs, DEFAULT_RATIOS, seed).unwrap();
        let mut all: Vec<usize> = split.train.iter().chain(&split.val).chain(&split.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..recs.len()).collect::<Vec<_>>());
        let key = |i: usize| (recs[i].class_label, recs[i].image_id);
        let part = |set: &[usize]| set.iter().map(|&i| key(i)).collect::<std::collections::BTreeSet<_>>();
        let (tr, va, te) = (part(&split.train), part(&split.val), part(&split.test));
        prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
    }

    #[test]
    fn fft_matches_the_naive_transform(x in prop::collection::vec(-10f64..10.0, 1..97)) {
        let fast = fft_real(&x);
        let slow = dft_naive(&x.iter().map(|&v| Complex64::new(v, 0.0)).collect::<Vec<_>>());
        let scale: f64 = x.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((a - b).norm() < 1e-9 * scale);
        }
        let mut back = fast.clone();
        FftPlan::new(x.len()).inverse(&mut back);
        for (a, &b) in back.iter().zip(&x) {
            prop_assert!((a.re - b).abs() < 1e-9 * scale && a.im.abs() < 1e-9 * scale);
        }
    }

    #[test]
    fn si_loss_is_bounded_and_scale_invariant(
        a in unit3(), b in unit3(), c in unit3(),
        sa in 0.01f64..100.0, sb in 0.01f64..100.0, sc in 0.01f64..100.0,
        lambda in 0.0f64..1.0,
    ) {
        let l = si(&a, &b, &c, lambda);
        prop_assert!(l >= -1e-12 && l <= 2.0 * (1.0 + lambda) + 1e-12);
        let scaled = si(
            &a.iter().map(|v| v * sa).collect::<Vec<_>>(),
            &b.iter().map(|v| v * sb).collect::<Vec<_>>(),
            &c.iter().map(|v| v * sc).collect::<Vec<_>>(),
            lambda,
        );
        prop_assert!((l - scaled).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn si_minimiser_is_the_normalised_target_sum(b in unit3(), c in unit3()) {
        let unit = |v: &[f64]| { let n = v.iter().map(|x| x * x).sum::<f64>().sqrt(); v.iter().map(|x| x / n).collect::<Vec<_>>() };
        let (bh, ch) = (unit(&b), unit(&c));
        let sum: Vec<f64> = bh.iter().zip(&ch).map(|(x, y)| x + y).collect();
        prop_assume!(sum.iter().map(|x| x * x).sum::<f64>() > 1e-2);
        let best = unit(&sum);
        let at_best = si(&best, &b, &c, 1.0);
        // brute-force sweep over the sphere
        let steps = 120;
        for i in 0..=steps {
            let theta = std::f64::consts::PI * i as f64 / steps as f64;
            for j in 0..2 * steps {
                let phi = std::f64::consts::PI * j as f64 / steps as f64;
                let d = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
                prop_assert!(si(&d, &b, &c, 1.0) >= at_best - 1e-12);
            }
        }
    }
}

#[test]
fn synthetic_generation_is_deterministic() {
    let spec = SyntheticGenSpec::separable(5, 4, 2, 3, 40, 200.0, 0.1, 9).unwrap();
    let a = generate_synthetic(&spec).unwrap();
    assert_eq!(a, generate_synthetic(&spec).unwrap());
    let other = SyntheticGenSpec { seed: 10, ..spec };
    assert_ne!(a, generate_synthetic(&other).unwrap());
}

#[test]
fn fft_is_linear_and_keeps_energy() {
    let mut r = rng(12);
    for _ in 0..20 {
        let x: Vec<f64> = Tensor::<f64>::randn([440], 1.0, &mut r).data().to_vec();
        let y: Vec<f64> = Tensor::<f64>::randn([440], 1.0, &mut r).data().to_vec();
        let (a, b) = (1.7, -0.3);
        let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let (fx, fy, fm) = (fft_real(&x), fft_real(&y), fft_real(&mix));
        for k in 0..440 {
            let want = fx[k] * a + fy[k] * b;
            assert!((fm[k] - want).norm() <= 1e-6 * want.norm().max(1.0));
        }
        let time: f64 = x.iter().map(|v| v * v).sum();
        let freq: f64 = fx.iter().map(|v| v.norm_sqr()).sum::<f64>() / 440.0;
        assert!((time - freq).abs() < 1e-6 * time);
    }
}

#[test]
fn frequency_encoder_rejects_mismatched_channels() {
    let mut store = ParamStore::<f64>::new();
    let enc = FreqEncoder::new(&mut store, &mut rng(0), 3, 4, 2).unwrap();
    let wrong = fft_magnitude(&[0.5f32; 2 * 16], 2, 16, 100.0).unwrap();
    let mut tape = Tape::inference();
    assert!(enc.encode(&mut tape, &store, &[&wrong]).is_err());
}

#[test]
fn teacher_gets_no_gradient_and_losses_add() {
    let cfg = lmm_cfg();
    let mut store = ParamStore::<f64>::new();
    let model = LmmModel::new(&mut store, &mut rng(1), cfg).unwrap();
    let rec = |s: u64| Tensor::<f64>::randn([cfg.n_units, cfg.unit_dim], 1.0, &mut rng(s));
    let batch = [rec(2), rec(3)];
    let refs: Vec<&Tensor<f64>> = batch.iter().collect();
    let plans = batch_plans(cfg.n_units, cfg.mask_ratio, 2, 5, 0, 0).unwrap();
    let mut tape = Tape::new();
    let (loss, _, _) = model.step(&mut tape, &store, &refs, &plans).unwrap();
    let (reg, cls, total) = (tape.value(loss.reg).item(), tape.value(loss.cls).item(), tape.value(loss.total).item());
    assert_eq!(total, reg + cls);
    let grads = tape.backward(loss.total).unwrap().into_named();
    assert!(grads.keys().any(|k| k.starts_with("time.")));
    assert!(grads.keys().all(|k| !k.starts_with("time_teacher.")));
    assert!(grads.keys().all(|k| k != "lmm.tokenizer.weight"));
}

#[test]
fn teacher_update_moves_toward_the_student() {
    let cfg = lmm_cfg();
    let mut store = ParamStore::<f64>::new();
    let model = LmmModel::new(&mut store, &mut rng(1), cfg).unwrap();
    let name = store.names().find(|n| n.starts_with("time.")).unwrap().to_owned();
    let teacher = format!("time_teacher.{}", &name["time.".len()..]);
    let shape = store.get(&name).unwrap().shape().to_vec();
    store.set(&name, Tensor::from_fn(shape.clone(), |_| 1.0)).unwrap();
    store.set(&teacher, Tensor::zeros(shape)).unwrap();
    model.teacher_update(&mut store, 0.75).unwrap();
    assert!(store.get(&teacher).unwrap().data().iter().all(|&v| v == 0.25));
}

#[test]
fn records_reject_bad_shapes() {
    assert!(EegRecord::new(2, 3, vec![0.0; 5], 0, 0, 0).is_err());
    assert!(EegRecord::new(1, 2, vec![0.0, f32::NAN], 0, 0, 0).is_err());
    assert!(segment_units(&[0.0; 12], 2, 6, 4).is_err());
}
