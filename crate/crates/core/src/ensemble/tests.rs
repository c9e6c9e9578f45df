use proptest::prelude::*;

use super::*;
use crate::library::PredictionCache;
use crate::synthetic::{random_library, SyntheticSpec};

fn lib_of(rows: &[&[[f64; 2]]], test_labels: Vec<usize>) -> ModelLibrary {
    let caches = rows
        .iter()
        .enumerate()
        .map(|(i, r)| PredictionCache {
            model_id: i,
            test_probs: Matrix::from_rows(r),
            cv_probs: Matrix::from_rows(r),
        })
        .collect();
    let cv = test_labels.clone();
    ModelLibrary::from_caches(vec!["a".into(), "b".into()], test_labels, cv, caches).unwrap()
}

fn synth(models: usize, seed: u64) -> ModelLibrary {
    random_library(SyntheticSpec {
        models,
        n_test: 60,
        n_cv: 80,
        classes: 3,
        seed,
    })
}

#[test]
fn mean_of_two_rows() {
    let lib = lib_of(&[&[[0.2, 0.8], [0.5, 0.5]], &[[0.6, 0.4], [0.5, 0.5]]], vec![0, 1]);
    let c = combine(&lib, &[0, 1], Block::Test).unwrap();
    assert!((c.get(0, 0) - 0.4).abs() < 1e-15 && (c.get(0, 1) - 0.6).abs() < 1e-15);
    assert!(matches!(combine(&lib, &[], Block::Test), Err(EnsembleError::Empty)));
    assert!(matches!(combine(&lib, &[5], Block::Test), Err(EnsembleError::UnknownModel(5))));
}

#[test]
fn singleton_is_identity() {
    let lib = synth(4, 1);
    for m in 0..4 {
        assert_eq!(combine(&lib, &[m], Block::Test).unwrap(), lib.caches[m].test_probs);
        assert_eq!(combine(&lib, &[m], Block::Cv).unwrap(), lib.caches[m].cv_probs);
        let s = evaluate(&lib, &[m]).unwrap();
        assert_eq!(s.perf.accuracy_cv, lib.model_metrics[m].accuracy_cv);
        assert_eq!(s.perf.accuracy_test, lib.model_metrics[m].accuracy_test);
    }
}

#[test]
fn shared_argmax_survives_mean() {
    let lib = synth(5, 2);
    let members = [0, 2, 4];
    let c = combine(&lib, &members, Block::Test).unwrap();
    for i in 0..lib.n_test() {
        let a = lib.test_pred(0)[i];
        if members.iter().all(|&m| lib.test_pred(m)[i] == a) {
            assert_eq!(argmax(c.row(i)), a);
        }
    }
}

#[test]
fn order_invariant() {
    let lib = synth(5, 3);
    let a = combine(&lib, &[4, 1, 3], Block::Cv).unwrap();
    let b = combine(&lib, &[1, 3, 4], Block::Cv).unwrap();
    assert_eq!(a, b);
}

#[test]
fn rows_sum_to_one() {
    let lib = synth(6, 4);
    let s = evaluate(&lib, &[0, 1, 2, 3, 4, 5]).unwrap();
    for r in s.combined_test.iter_rows() {
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    for (i, c) in s.correct.iter().enumerate() {
        assert_eq!(*c, s.pred[i] == lib.test_labels()[i]);
    }
}

#[test]
fn toggle_in_out_is_involution() {
    let lib = synth(6, 5);
    let mut t = Tracker::new(&lib, &[1, 3]).unwrap();
    let before = t.state(&lib).unwrap();
    assert!(t.toggle(&lib, 4).unwrap());
    assert!(!t.toggle(&lib, 4).unwrap());
    let after = t.state(&lib).unwrap();
    assert_eq!(before.members, after.members);
    for (a, b) in before.combined_test.as_slice().iter().zip(after.combined_test.as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(before.perf.accuracy_test, after.perf.accuracy_test);
}

#[test]
fn last_member_cannot_be_removed() {
    let lib = synth(3, 6);
    let mut t = Tracker::new(&lib, &[2]).unwrap();
    assert_eq!(t.toggle(&lib, 2), Err(EnsembleError::Empty));
    assert_eq!(t.members(), &[2]);
    assert_eq!(t.toggle(&lib, 9), Err(EnsembleError::UnknownModel(9)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn incremental_matches_full(seed in 0u64..1000, toggles in prop::collection::vec(0usize..6, 1..30)) {
        let lib = synth(6, seed);
        let mut t = Tracker::new(&lib, &[0]).unwrap();
        for m in toggles {
            let _ = t.toggle(&lib, m);
            let inc = t.state(&lib).unwrap();
            let full = evaluate(&lib, t.members()).unwrap();
            for (a, b) in inc.combined_test.as_slice().iter().zip(full.combined_test.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn dominating_model_selected_alone() {
    // model 0 is perfect on cv; the others are wrong everywhere
    let good: &[[f64; 2]] = &[[0.9, 0.1], [0.1, 0.9], [0.9, 0.1], [0.1, 0.9]];
    let bad: &[[f64; 2]] = &[[0.2, 0.8], [0.8, 0.2], [0.2, 0.8], [0.8, 0.2]];
    let lib = lib_of(&[bad, good, bad], vec![0, 1, 0, 1]);
    let t = auto_select(&lib, &SelectParams::default()).unwrap();
    assert_eq!(t.final_members, vec![1]);
    assert_eq!(t.final_value, 1.0);
}

#[test]
fn single_model_library() {
    let lib = synth(1, 7);
    let t = auto_select(&lib, &SelectParams::default()).unwrap();
    assert_eq!(t.final_members, vec![0]);
}

fn check_trace(t: &SelectionTrace) {
    for w in t.steps.windows(2) {
        let same_bag = w[0].bag == w[1].bag;
        let climbing = matches!(w[1].phase, Phase::Forward | Phase::Backward);
        if same_bag && climbing {
            assert!(w[1].value >= w[0].value, "{:?}", t.steps);
        }
    }
    assert_eq!(t.replay(), t.final_members);
}

#[test]
fn greedy_never_below_best_single() {
    for seed in 0..100 {
        let lib = synth(6, seed);
        let params = SelectParams {
            max_size: 3,
            ..Default::default()
        };
        let t = auto_select(&lib, &params).unwrap();
        let best = (0..6)
            .map(|m| set_value(&lib, &[m], Hillclimb::AccCv).unwrap())
            .fold(f64::MIN, f64::max);
        assert!(t.final_value >= best, "seed {seed}");
        assert_eq!(t.final_value, set_value(&lib, &t.final_members, Hillclimb::AccCv).unwrap());
        assert!(t.final_members.len() <= 3);
        check_trace(&t);
    }
}

#[test]
fn auc_hillclimb_and_bagging() {
    for seed in 0..10 {
        let lib = synth(8, 100 + seed);
        let params = SelectParams {
            hillclimb: Hillclimb::AucCv,
            max_size: 5,
            bags: 4,
            bag_fraction: 0.5,
            seed,
        };
        let t = auto_select(&lib, &params).unwrap();
        assert!(t.final_value >= t.best_single_value);
        assert!(t.steps.iter().any(|s| s.bag == 3));
        check_trace(&t);
        let again = auto_select(&lib, &params).unwrap();
        assert_eq!(t, again);
        let w: f64 = t.weights.values().sum();
        assert!((w - 1.0).abs() < 1e-9);
    }
}

#[test]
fn greedy_against_exhaustive_subsets() {
    let mut matches = 0;
    for seed in 0..100 {
        let lib = synth(6, 500 + seed);
        let params = SelectParams {
            max_size: 3,
            ..Default::default()
        };
        let t = auto_select(&lib, &params).unwrap();
        let mut best = f64::MIN;
        for mask in 1u32..64 {
            if mask.count_ones() > 3 {
                continue;
            }
            let set: Vec<usize> = (0..6).filter(|i| mask & (1 << i) != 0).collect();
            best = best.max(set_value(&lib, &set, Hillclimb::AccCv).unwrap());
        }
        assert!(t.final_value <= best + 1e-12 || t.final_members.len() > 3);
        matches += usize::from((t.final_value - best).abs() < 1e-12);
    }
    println!("greedy matched the exhaustive optimum in {matches}/100 trials");
    assert!(matches > 0);
}

#[test]
fn hillclimb_names() {
    assert_eq!(Hillclimb::parse("acc_cv").unwrap(), Hillclimb::AccCv);
    assert_eq!(Hillclimb::parse("auc_w").unwrap(), Hillclimb::AucCv);
    assert!(Hillclimb::parse("acc_local").is_err());
}

#[test]
fn guard_examples() {
    let lib = synth(3, 8);
    let mut s = evaluate(&lib, &[0]).unwrap();
    assert_eq!(guard_check(&s, &s, 0.0), GuardVerdict::Ok);
    let mut worse = s.clone();
    worse.perf.accuracy_test = s.perf.accuracy_test - 0.002;
    assert_eq!(guard_check(&s, &worse, 0.005), GuardVerdict::Ok);
    s.perf.accuracy_test = 0.8;
    worse.perf.accuracy_test = 0.79;
    match guard_check(&s, &worse, 0.0) {
        GuardVerdict::Violated { delta } => assert!((delta - 0.01).abs() < 1e-12),
        GuardVerdict::Ok => panic!("expected violation"),
    }
}
