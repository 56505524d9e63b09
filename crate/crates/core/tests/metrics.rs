use brainvis_core::metrics::{
    f1_macro, fid, in_top_k, inception_score, inception_score_splits, n_way_top_k, per_class, ssim, top_k_accuracy,
    GaConfig, SsimConfig,
};
use brainvis_core::Tensor;
use proptest::prelude::*;

/// Rank of `y` in a full stable sort by descending score.
fn sorted_rank(row: &[f64], y: usize) -> usize {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx.iter().position(|&i| i == y).unwrap()
}

fn softmax_rows(x: &Tensor<f64>) -> Tensor<f64> {
    let (n, c) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        let row = x.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    Tensor::new([n, c], out).unwrap()
}

fn matrix(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    (rows, cols).prop_flat_map(move |(n, c)| {
        prop::collection::vec(lo..hi, n * c).prop_map(move |v| Tensor::new([n, c], v).unwrap())
    })
}

/// Logits on a coarse integer grid so ties are common.
fn tied_logits() -> impl Strategy<Value = (Tensor<f64>, Vec<usize>)> {
    (1usize..12, 2usize..8).prop_flat_map(|(n, c)| {
        (
            prop::collection::vec(-3i32..3, n * c).prop_map(move |v| Tensor::new([n, c], v.into_iter().map(f64::from).collect()).unwrap()),
            prop::collection::vec(0..c, n),
        )
    })
}

/// Exact hit rate of one sample over every `(N−1)`-subset of the other
/// classes.
fn exhaustive_hit_rate(row: &[f64], y: usize, n_way: usize, k: usize) -> f64 {
    let others: Vec<usize> = (0..row.len()).filter(|&j| j != y).collect();
    let (mut hits, mut total) = (0usize, 0usize);
    for mask in 0u32..(1 << others.len()) {
        if mask.count_ones() as usize != n_way - 1 {
            continue;
        }
        let ahead = others
            .iter()
            .enumerate()
            .filter(|&(b, &j)| mask & (1 << b) != 0 && (row[j] > row[y] || (row[j] == row[y] && j < y)))
            .count();
        hits += (ahead < k) as usize;
        total += 1;
    }
    hits as f64 / total as f64
}

fn kl_double_loop(p: &Tensor<f64>) -> f64 {
    let (n, c) = (p.rows(), p.cols());
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..c {
            let pij = p.data()[i * c + j];
            if pij > 0.0 {
                let marg: f64 = (0..n).map(|r| p.data()[r * c + j]).sum::<f64>() / n as f64;
                total += pij * (pij / marg).ln();
            }
        }
    }
    (total / n as f64).exp()
}

/// All sign patterns `μ ± s` on each axis: the sample covariance is exactly
/// diagonal with entries `s²·n/(n−1)`.
fn sign_grid(mu: &[f64], s: &[f64]) -> Tensor<f64> {
    let d = mu.len();
    let n = 1usize << d;
    Tensor::from_fn([n, d], |k| {
        let (i, j) = (k / d, k % d);
        if i >> j & 1 == 1 {
            mu[j] + s[j]
        } else {
            mu[j] - s[j]
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn top_k_matches_a_full_sort((logits, labels) in tied_logits(), k in 1usize..8) {
        let k = k.min(logits.cols());
        for (i, &y) in labels.iter().enumerate() {
            prop_assert_eq!(in_top_k(logits.row(i), y, k), sorted_rank(logits.row(i), y) < k);
        }
        let acc = top_k_accuracy(&logits, &labels, k).unwrap();
        let oracle = labels.iter().enumerate().filter(|&(i, &y)| sorted_rank(logits.row(i), y) < k).count() as f64 / labels.len() as f64;
        prop_assert_eq!(acc, oracle);
    }

    #[test]
    fn argmax_ignores_positive_scale_and_shift((logits, labels) in tied_logits(), a in 0.1f64..10.0, b in -5f64..5.0) {
        let moved = logits.map(|v| a * v + b);
        for k in 1..=logits.cols() {
            prop_assert_eq!(top_k_accuracy(&logits, &labels, k).unwrap(), top_k_accuracy(&moved, &labels, k).unwrap());
        }
    }

    #[test]
    fn classification_metrics_stay_in_range(pred in prop::collection::vec(0usize..5, 1..30), seed in any::<u64>()) {
        let labels: Vec<usize> = pred.iter().enumerate().map(|(i, &p)| (p + (seed as usize >> (i % 32)) % 3) % 5).collect();
        let f1 = f1_macro(&pred, &labels, 5).unwrap();
        prop_assert!((0.0..=1.0).contains(&f1));
        for row in per_class(&pred, &labels, 5).unwrap() {
            prop_assert!((0.0..=1.0).contains(&row.precision) && (0.0..=1.0).contains(&row.recall) && (0.0..=1.0).contains(&row.f1));
        }
        prop_assert!(f1_macro(&labels, &labels, 5).unwrap() > 0.0);
    }

    #[test]
    fn inception_score_matches_a_double_loop(x in matrix(1..10, 2..6, -4.0, 4.0)) {
        let p = softmax_rows(&x);
        let is = inception_score(&p).unwrap();
        prop_assert!((is - kl_double_loop(&p)).abs() < 1e-9 * is);
        prop_assert!(is >= 1.0 - 1e-9 && is <= p.cols() as f64 + 1e-9);
        let (m, s) = inception_score_splits(&p, 3).unwrap();
        prop_assert!(m >= 1.0 - 1e-9 && s >= 0.0);
    }

    #[test]
    fn fid_is_symmetric_and_zero_on_itself(a in matrix(4..12, 1..4, -3.0, 3.0), shift in -2f64..2.0) {
        let b = Tensor::from_fn(a.shape().to_vec(), |i| a.data()[(i * 7) % a.len()] * 0.5 + shift);
        let ab = fid(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - fid(&b, &a).unwrap()).abs() < 1e-8 * (1.0 + ab));
        prop_assert!(fid(&a, &a).unwrap() < 1e-8);
    }

    #[test]
    fn fid_matches_the_commuting_closed_form(
        mu_a in prop::collection::vec(-2f64..2.0, 3),
        mu_b in prop::collection::vec(-2f64..2.0, 3),
        s_a in prop::collection::vec(0.1f64..3.0, 3),
        s_b in prop::collection::vec(0.1f64..3.0, 3),
        d in 1usize..4,
    ) {
        let (a, b) = (sign_grid(&mu_a[..d], &s_a[..d]), sign_grid(&mu_b[..d], &s_b[..d]));
        let n = (1usize << d) as f64;
        let c = n / (n - 1.0);
        let closed: f64 = (0..d)
            .map(|j| (mu_a[j] - mu_b[j]).powi(2) + c * (s_a[j] - s_b[j]).powi(2))
            .sum();
        prop_assert!((fid(&a, &b).unwrap() - closed).abs() < 1e-6);
    }

    #[test]
    fn ssim_is_one_on_itself_and_bounded(a in prop::collection::vec(-1f64..1.0, 3 * 9 * 11), b in prop::collection::vec(-1f64..1.0, 3 * 9 * 11)) {
        let (a, b) = (Tensor::new([3, 9, 11], a).unwrap(), Tensor::new([3, 9, 11], b).unwrap());
        let cfg = SsimConfig::default();
        prop_assert!((ssim(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-9);
        let s = ssim(&a, &b, &cfg).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - ssim(&b, &a, &cfg).unwrap()).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ga_agrees_with_exhaustive_subsets((logits, labels) in tied_logits().prop_filter("≥3 classes", |(l, _)| l.cols() >= 3 && l.cols() <= 6), seed in any::<u64>()) {
        let c = logits.cols();
        let probs = softmax_rows(&logits);
        for n_way in 2..=c {
            for k in 1..n_way {
                let cfg = GaConfig { n_way, k, n_trials: 400, seed };
                let mc = n_way_top_k(&probs, &labels, &cfg).unwrap();
                let exact: Vec<f64> = labels.iter().enumerate().map(|(i, &y)| exhaustive_hit_rate(probs.row(i), y, n_way, k)).collect();
                let n = labels.len() as f64;
                let mean = exact.iter().sum::<f64>() / n;
                let var = exact.iter().map(|p| p * (1.0 - p)).sum::<f64>() / (n * n * cfg.n_trials as f64);
                // ~300 comparisons per run on fresh seeds: 3σ would trip about once a run
                prop_assert!((mc - mean).abs() <= 5.0 * var.sqrt() + 1e-12, "N={} K={}: {} vs {}", n_way, k, mc, mean);
            }
        }
    }

    #[test]
    fn ga_never_drops_as_k_grows((logits, labels) in tied_logits().prop_filter("≥3 classes", |(l, _)| l.cols() >= 3), seed in any::<u64>()) {
        let c = logits.cols();
        let probs = softmax_rows(&logits);
        let rates: Vec<f64> = (1..c)
            .map(|k| n_way_top_k(&probs, &labels, &GaConfig { n_way: c, k, n_trials: 20, seed }).unwrap())
            .collect();
        prop_assert!(rates.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(rates.iter().all(|r| (0.0..=1.0).contains(r)));
    }
}

#[test]
fn inception_score_extremes() {
    let uniform = Tensor::from_fn([7, 5], |_| 0.2);
    assert!((inception_score(&uniform).unwrap() - 1.0).abs() < 1e-6);
    let onehots = Tensor::from_fn([5, 5], |k| if k / 5 == k % 5 { 1.0 } else { 0.0 });
    assert!((inception_score(&onehots).unwrap() - 5.0).abs() < 1e-6);
}

#[test]
fn fid_of_shifted_isotropic_gaussians_is_the_squared_shift() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
    let d = 3;
    let a = Tensor::<f64>::randn([20000, d], 1.0, &mut rng);
    let delta = [1.0, -2.0, 0.5];
    let b = Tensor::<f64>::randn([20000, d], 1.0, &mut rng);
    let b = Tensor::from_fn([20000, d], |k| b.data()[k] + delta[k % d]);
    let expected: f64 = delta.iter().map(|v| v * v).sum();
    let got = fid(&a, &b).unwrap();
    assert!((got - expected).abs() < 0.1 * expected, "{got} vs {expected}");
}
