use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use restp::seed;
use restp::svm::{primal_objective, train_binary, SvmModel, SvmParams};

/// Subgradient descent on the primal with step a/sqrt(t), keeping the best iterate.
fn subgradient_oracle(xs: &[Vec<f32>], ys: &[f64], c: f64, iters: usize) -> f64 {
    let refs: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
    let d = xs[0].len();
    let mut w = vec![0.0f64; d + 1];
    let mut best = primal_objective(&refs, ys, &w, c);
    let scale: f64 = xs.iter().map(|x| x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() + 1.0).sum();
    let a = 1.0 / (1.0 + c * scale.sqrt());
    for t in 1..=iters {
        let mut g = w.clone();
        for (x, &y) in xs.iter().zip(ys) {
            let m: f64 = x.iter().zip(&w).map(|(&v, &wj)| v as f64 * wj).sum::<f64>() + w[d];
            if y * m < 1.0 {
                for j in 0..d {
                    g[j] -= c * y * x[j] as f64;
                }
                g[d] -= c * y;
            }
        }
        let step = a / (t as f64).sqrt();
        for (wj, gj) in w.iter_mut().zip(&g) {
            *wj -= step * gj;
        }
        best = best.min(primal_objective(&refs, ys, &w, c));
    }
    best
}

fn blobs(n: usize, gap: f64, seed: u64) -> (Vec<Vec<f32>>, Vec<f64>) {
    let mut rng = seed::rng(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..n {
        let y = if i % 2 == 0 { 1.0 } else { -1.0 };
        let cx = y * gap;
        xs.push(vec![(cx + noise.sample(&mut rng)) as f32, (0.5 * cx + noise.sample(&mut rng)) as f32]);
        ys.push(y);
    }
    (xs, ys)
}

#[test]
fn dual_solver_matches_subgradient_oracle() {
    for (seed, gap) in [(1, 3.0), (2, 1.0), (3, 0.3), (4, 2.0)] {
        let (xs, ys) = blobs(20, gap, seed);
        let refs: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
        let sol = train_binary(&refs, &ys, &SvmParams::default());
        assert!(sol.converged);
        let ours = primal_objective(&refs, &ys, &sol.weights, 1.0);
        let oracle = subgradient_oracle(&xs, &ys, 1.0, 200_000);
        let rel = (ours - oracle).abs() / oracle;
        assert!(rel <= 1e-3, "seed {seed}: dcd {ours} vs oracle {oracle} (rel {rel})");
    }
}

#[test]
fn separable_set_is_fit_exactly() {
    let (xs, ys) = blobs(20, 6.0, 7);
    let refs: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
    let labels: Vec<usize> = ys.iter().map(|&y| if y > 0.0 { 1 } else { 0 }).collect();
    let model = SvmModel::train(&refs, &labels, &SvmParams::default()).unwrap();
    assert_eq!(model.predict_batch(&refs).unwrap(), labels);
}

#[test]
fn duplicating_points_and_halving_c_is_equivalent() {
    let (xs, ys) = blobs(20, 0.8, 8);
    let refs: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
    let doubled: Vec<&[f32]> = refs.iter().chain(&refs).copied().collect();
    let ys2: Vec<f64> = ys.iter().chain(&ys).copied().collect();
    let tight = SvmParams {
        tolerance: 1e-7,
        max_epochs: 100_000,
        ..SvmParams::default()
    };
    let a = train_binary(&refs, &ys, &tight);
    let b = train_binary(&doubled, &ys2, &SvmParams { c: 0.5, ..tight.clone() });
    for (u, v) in a.weights.iter().zip(&b.weights) {
        assert!((u - v).abs() < 1e-5, "{:?} vs {:?}", a.weights, b.weights);
    }
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let (xs, ys) = blobs(20, 0.5, 9);
    let refs: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
    let labels: Vec<usize> = ys.iter().map(|&y| (y > 0.0) as usize).collect();
    let p = SvmParams::default();
    assert_eq!(SvmModel::train(&refs, &labels, &p).unwrap(), SvmModel::train(&refs, &labels, &p).unwrap());
}

fn three_class(seed: u64) -> (Vec<Vec<f32>>, Vec<usize>) {
    let mut rng = seed::rng(seed);
    let centers = [(0.0, 3.0), (3.0, -2.0), (-3.0, -2.0)];
    let mut xs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..30 {
        let k = i % 3;
        xs.push(vec![
            (centers[k].0 + rng.gen_range(-1.0..1.0)) as f32,
            (centers[k].1 + rng.gen_range(-1.0..1.0)) as f32,
        ]);
        labels.push(k);
    }
    (xs, labels)
}

#[test]
fn permuting_the_rest_classes_keeps_each_machine() {
    let (xs, labels) = three_class(10);
    let tight = SvmParams {
        tolerance: 1e-7,
        max_epochs: 100_000,
        ..SvmParams::default()
    };
    let refs: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
    let base = SvmModel::train(&refs, &labels, &tight).unwrap();

    // Reorder the samples of classes 1 and 2 among themselves; class 0 versus rest sees the same problem.
    let mut rest: Vec<usize> = (0..xs.len()).filter(|&i| labels[i] != 0).collect();
    rest.reverse();
    let mut it = rest.into_iter();
    let perm: Vec<usize> = (0..xs.len()).map(|i| if labels[i] == 0 { i } else { it.next().unwrap() }).collect();
    let xs2: Vec<&[f32]> = perm.iter().map(|&i| xs[i].as_slice()).collect();
    let labels2: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
    let other = SvmModel::train(&xs2, &labels2, &tight).unwrap();
    for (u, v) in base.weights[0].iter().zip(&other.weights[0]) {
        assert!((u - v).abs() < 1e-4);
    }
    assert!((base.biases[0] - other.biases[0]).abs() < 1e-4);
}

proptest! {
    #[test]
    fn prediction_ignores_positive_rescaling(scale in 0.01f32..100.0, x in prop::collection::vec(-5.0f32..5.0, 2)) {
        let (xs, labels) = three_class(11);
        let refs: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
        let model = SvmModel::train(&refs, &labels, &SvmParams::default()).unwrap();
        let mut scaled = model.clone();
        scaled.weights.iter_mut().flatten().for_each(|w| *w *= scale);
        scaled.biases.iter_mut().for_each(|b| *b *= scale);
        let s = model.scores(&x).unwrap();
        let mut sorted = s.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        // skip near-ties where f32 rounding of the scaled weights could flip the order
        prop_assume!(sorted[0] - sorted[1] > 1e-4 * sorted[0].abs().max(1.0));
        prop_assert_eq!(model.predict(&x).unwrap(), scaled.predict(&x).unwrap());
    }

    #[test]
    fn batch_prediction_is_elementwise(points in prop::collection::vec(prop::collection::vec(-5.0f32..5.0, 2), 1..20)) {
        let (xs, labels) = three_class(12);
        let refs: Vec<&[f32]> = xs.iter().map(Vec::as_slice).collect();
        let model = SvmModel::train(&refs, &labels, &SvmParams::default()).unwrap();
        let prefs: Vec<&[f32]> = points.iter().map(Vec::as_slice).collect();
        let batch = model.predict_batch(&prefs).unwrap();
        for (p, b) in prefs.iter().zip(batch) {
            prop_assert_eq!(model.predict(p).unwrap(), b);
        }
    }
}
