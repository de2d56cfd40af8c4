use diam::gradcheck::{random_case, GradCase};
use diam::labels::{encode_labels, project_new2old};
use diam::numeric::forward;
use diam::objective::{grad_total, loss_total, Objective, SupportExample};
use diam::prior::{uniform_prior, PriorVector};
use diam::{ClassPartition, FeatureMap, LabelMask, LossWeights, ProbMap, Similarity};
use ndarray::{array, concatenate, s, Array2, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_abs(a: &Array2<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn one_hot_features(classes: &[usize], d: usize, scale: f64) -> FeatureMap {
    let mut f = Array2::zeros((classes.len(), d));
    for (j, &c) in classes.iter().enumerate() {
        f[[j, c]] = scale;
    }
    FeatureMap::new(f, 1, classes.len()).unwrap()
}

#[test]
fn uniform_point_is_stationary_without_supervision() {
    let partition = ClassPartition::new(2, 1).unwrap();
    let k = partition.n_classes();
    let support = vec![SupportExample {
        features: FeatureMap::new(array![[0.3, -1.2, 0.7]], 1, 1).unwrap(),
        labels: encode_labels(&LabelMask::new(vec![3]), &partition).unwrap(),
    }];
    let query = FeatureMap::new(array![[0.9, 0.4, -2.0]], 1, 1).unwrap();
    let old = ProbMap::new(array![[0.2, 0.5, 0.3]]).unwrap();
    let prior = uniform_prior(&partition);
    let obj = Objective {
        support: &support,
        query: &query,
        prior: &prior,
        old_probs: &old,
        partition,
        weights: LossWeights::new(0.0, 0.0),
        similarity: Similarity::Dot,
    };
    // theta = 0 gives a uniform prediction on every pixel.
    let g = grad_total(&obj, &Array2::zeros((k, 3))).unwrap();
    assert!(max_abs(&g) < 1e-15, "{g}");
}

#[test]
fn duplicated_pixels_leave_the_gradient_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let case = random_case(&mut rng);
        let dup_query = {
            let p = case.query.pixels();
            FeatureMap::new(concatenate![Axis(0), p.view(), p.view()], 2 * case.query.height(), case.query.width())
                .unwrap()
        };
        let dup_old = {
            let o = case.old_probs.as_array();
            ProbMap::new(concatenate![Axis(0), o.view(), o.view()]).unwrap()
        };
        let dup_support: Vec<SupportExample> = case
            .support
            .iter()
            .map(|s| {
                let f = s.features.pixels();
                let y = s.labels.as_array();
                let labels: Vec<u8> = y
                    .axis_iter(Axis(0))
                    .chain(y.axis_iter(Axis(0)))
                    .map(|r| r.iter().position(|&v| v == 1.0).map_or(255, |c| c as u8))
                    .collect();
                SupportExample {
                    features: FeatureMap::new(
                        concatenate![Axis(0), f.view(), f.view()],
                        2 * s.features.height(),
                        s.features.width(),
                    )
                    .unwrap(),
                    labels: encode_labels(&LabelMask::new(labels), &case.partition).unwrap(),
                }
            })
            .collect();
        let single = grad_total(&case.objective(), &case.theta).unwrap();
        let doubled = grad_total(
            &Objective {
                support: &dup_support,
                query: &dup_query,
                old_probs: &dup_old,
                ..case.objective()
            },
            &case.theta,
        )
        .unwrap();
        let scale = max_abs(&single).max(1.0);
        assert!(max_abs(&(&doubled - &single)) < 1e-12 * scale);
    }
}

/// Every term sits at its minimum: the support is fit, the query is one-hot
/// with its own proportions as prior, and the old model agrees after
/// projection.
#[test]
fn zero_loss_region_has_vanishing_gradient() {
    let partition = ClassPartition::new(2, 2).unwrap();
    let k = partition.n_classes();
    let theta = Array2::eye(k) * 8.0;
    let support_classes = [0, 3, 4, 1, 2];
    let support = vec![SupportExample {
        features: one_hot_features(&support_classes, k, 8.0),
        // base objects in support are annotated as background
        labels: encode_labels(&LabelMask::new(vec![0, 3, 4, 0, 0]), &partition).unwrap(),
    }];
    let query_classes = [0, 0, 1, 2, 3, 4, 4, 1];
    let query = one_hot_features(&query_classes, k, 8.0);
    let q_probs = forward(&query, &theta).unwrap();
    let old = project_new2old(&q_probs, &partition).unwrap();
    let mut counts = vec![0.0; k];
    for &c in &query_classes {
        counts[c] += 1.0 / query_classes.len() as f64;
    }
    let prior = PriorVector::new(diam::numeric::marginal(&q_probs)).unwrap();
    let obj = Objective {
        support: &support,
        query: &query,
        prior: &prior,
        old_probs: &old,
        partition,
        weights: LossWeights::default(),
        similarity: Similarity::Dot,
    };
    let loss = obj.loss(&theta).unwrap();
    assert!(loss.total < 1e-9, "{loss:?}");
    let g = grad_total(&obj, &theta).unwrap();
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-6, "gradient norm {norm}");
    for (a, b) in prior.as_slice().iter().zip(&counts) {
        assert!((a - b).abs() < 1e-9);
    }
}

fn total(case: &GradCase, support: &[SupportExample]) -> f64 {
    let obj = Objective {
        support,
        ..case.objective()
    };
    let preds = obj.predict(&case.theta).unwrap();
    let labels: Vec<_> = support.iter().map(|s| s.labels.clone()).collect();
    loss_total(&preds, &labels, &case.prior, &case.old_probs, &case.partition, &case.weights)
        .unwrap()
        .total
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn terms_are_finite_and_nonnegative(seed in any::<u64>()) {
        let case = random_case(&mut ChaCha8Rng::seed_from_u64(seed));
        let l = case.objective().loss(&case.theta).unwrap();
        for v in [l.xent, l.query_entropy, l.marginal_kl, l.kd] {
            prop_assert!(v.is_finite() && v >= -1e-12, "{:?}", l);
        }
        let w = case.weights;
        let expect = w.alpha * l.xent + l.query_entropy + l.marginal_kl + w.beta * l.kd;
        prop_assert!((l.total - expect).abs() <= 1e-9 * expect.abs().max(1.0));
    }

    #[test]
    fn support_order_does_not_matter(seed in any::<u64>(), rot in 0usize..3) {
        let case = random_case(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut rotated = case.support.clone();
        let n = rotated.len();
        rotated.rotate_left(rot % n);
        rotated.reverse();
        let a = total(&case, &case.support);
        let b = total(&case, &rotated);
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn duplicate_support_image_doubles_the_supervised_term(seed in any::<u64>()) {
        let case = random_case(&mut ChaCha8Rng::seed_from_u64(seed));
        let first = case.support[..1].to_vec();
        let twice = vec![case.support[0].clone(), case.support[0].clone()];
        let one = Objective { support: &first, ..case.objective() }.loss(&case.theta).unwrap();
        let two = Objective { support: &twice, ..case.objective() }.loss(&case.theta).unwrap();
        prop_assert!((two.xent - 2.0 * one.xent).abs() <= 1e-12 * one.xent.max(1.0));
    }
}

#[test]
fn gradient_shape_covers_every_prototype_row() {
    let case = random_case(&mut ChaCha8Rng::seed_from_u64(5));
    let g = grad_total(&case.objective(), &case.theta).unwrap();
    assert_eq!(g.dim(), case.theta.dim());
    assert!(g.slice(s![..case.partition.n_old(), ..]).iter().any(|v| *v != 0.0));
    assert!(g.slice(s![case.partition.n_old().., ..]).iter().any(|v| *v != 0.0));
}
