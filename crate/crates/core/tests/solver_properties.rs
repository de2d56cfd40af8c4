use diam::inference::{initial_state, predict, run_diam};
use diam::labels::{argmax_decode, project_support};
use diam::numeric::forward;
use diam::taskgen::{gen_task, SyntheticConfig};
use diam::{GfssTask, LossWeights, SolverConfig, IGNORE};

fn small(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        d: 16,
        n_base: 3,
        n_novel: 1,
        height: 8,
        width: 8,
        shots: 1,
        tile: 2,
        base_per_image: 3,
        separation: 8.0,
        seed,
        ..SyntheticConfig::default()
    }
}

#[test]
fn huge_support_weight_fits_the_support_labels() {
    for seed in 0..3 {
        let ep = gen_task(&small(seed)).unwrap();
        let image = ep.task.support[0].clone();
        let task = GfssTask::new(vec![image.clone()], image.features.clone(), None, ep.task.partition).unwrap();
        let config = SolverConfig {
            weights: LossWeights::new(1e6, 100.0),
            ..SolverConfig::default()
        };
        let state = initial_state(&task, &ep.base_classifier).unwrap();
        let (state, _) = run_diam(&task, state, &config).unwrap();

        let probs = forward(&image.features, &state.theta()).unwrap();
        let predicted = argmax_decode(&project_support(&probs, &task.partition).unwrap());
        let (mut hit, mut total) = (0, 0);
        for (&p, &y) in predicted.as_slice().iter().zip(image.labels.as_slice()) {
            if y != IGNORE {
                total += 1;
                hit += usize::from(p == y);
            }
        }
        let acc = hit as f64 / total as f64;
        assert!(acc >= 0.99, "seed {seed}: support accuracy {acc}");
    }
}

#[test]
fn runs_are_bitwise_reproducible() {
    let ep = gen_task(&SyntheticConfig {
        n_novel: 2,
        shots: 2,
        ..small(4)
    })
    .unwrap();
    let config = SolverConfig {
        iterations: 30,
        ..SolverConfig::default()
    };
    let run = || {
        let state = initial_state(&ep.task, &ep.base_classifier).unwrap();
        run_diam(&ep.task, state, &config).unwrap()
    };
    let (s1, t1) = run();
    let (s2, t2) = run();
    assert_eq!(s1, s2);
    assert_eq!(t1.records, t2.records);
    assert_eq!(t1.final_probs, t2.final_probs);
    assert_eq!(s1.base_snapshot(), &ep.base_classifier);
}

#[test]
fn well_separated_task_segments_novel_classes() {
    let ep = gen_task(&SyntheticConfig {
        d: 64,
        separation: 8.0,
        seed: 17,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let state = initial_state(&ep.task, &ep.base_classifier).unwrap();
    let (state, trace) = run_diam(&ep.task, state, &SolverConfig::default()).unwrap();
    let (_, labels) = predict(&state, &ep.task.query, Default::default()).unwrap();
    let truth = ep.task.query_labels.as_ref().unwrap();
    let part = ep.task.partition;
    let (mut hit, mut total) = (0, 0);
    for (&p, &y) in labels.as_slice().iter().zip(truth.as_slice()) {
        if part.is_novel(y as usize) {
            total += 1;
            hit += usize::from(p == y);
        }
    }
    let acc = hit as f64 / total as f64;
    assert!(acc >= 0.95, "novel pixel accuracy {acc}");
    assert!(trace.last().loss.total <= trace.initial().loss.total);
}
