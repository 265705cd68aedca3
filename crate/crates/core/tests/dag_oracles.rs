mod common;

use common::{brute_force_makespan, pipeline, random_profile, uniform};
use pipefreeze_core::dag::MakespanEvaluator;
use pipefreeze_core::{validate_dag, ScheduleKind};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn longest_path_matches_enumeration_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in [ScheduleKind::GPipe, ScheduleKind::OneFOneB] {
        for s in 1..=2 {
            for m in 1..=4 {
                let (_, dag) = pipeline(kind, s, 1, m);
                let eval = MakespanEvaluator::new(&dag).unwrap();
                for _ in 0..5 {
                    let profile = random_profile(&dag, &mut rng);
                    let w = eval.weights_from(&profile.max_durations()).unwrap();
                    let got = eval.eval(&w).makespan;
                    assert_eq!(got.to_bits(), brute_force_makespan(&dag, &w).to_bits(), "{kind} S={s} M={m}");
                }
            }
        }
    }
}

#[test]
fn multi_chunk_schedules_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (kind, r, c, m) in [
        (ScheduleKind::InterleavedOneFOneB, 2, 2, 2),
        (ScheduleKind::InterleavedOneFOneB, 2, 2, 4),
        (ScheduleKind::Zbv, 2, 2, 2),
        (ScheduleKind::Zbv, 2, 2, 3),
    ] {
        let (_, dag) = pipeline(kind, r, c, m);
        assert!(validate_dag(&dag).ok);
        let eval = MakespanEvaluator::new(&dag).unwrap();
        let profile = random_profile(&dag, &mut rng);
        let w = eval.weights_from(&profile.min_durations()).unwrap();
        assert_eq!(eval.eval(&w).makespan, brute_force_makespan(&dag, &w));
    }
}

#[test]
fn gpipe_and_1f1b_closed_form() {
    for (f, b) in [(1.0, 2.0), (0.7, 1.3), (20.0, 45.0)] {
        for s in 1..=4 {
            for m in 1..=6 {
                let expect = (m + s - 1) as f64 * (f + b);
                for kind in [ScheduleKind::GPipe, ScheduleKind::OneFOneB] {
                    let (c, dag) = pipeline(kind, s, 1, m);
                    let p = uniform(&c, f, b, 0.0);
                    let eval = MakespanEvaluator::new(&dag).unwrap();
                    let got = eval.eval(&eval.weights_from(&p.max_durations()).unwrap()).makespan;
                    assert!((got - expect).abs() < 1e-9, "{kind} S={s} M={m}: {got} vs {expect}");
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dag_invariants(kind in 0..4usize, r in 1..4usize, m in 1..6usize, seed in any::<u64>()) {
        let (kind, c) = match kind {
            0 => (ScheduleKind::GPipe, 1),
            1 => (ScheduleKind::OneFOneB, 1),
            2 => (ScheduleKind::InterleavedOneFOneB, 2),
            _ => (ScheduleKind::Zbv, 2),
        };
        let (cfg, dag) = pipeline(kind, r, c, m);
        prop_assert_eq!(dag.num_nodes(), 2 * cfg.num_stages() * m + 2);
        let report = validate_dag(&dag);
        prop_assert!(report.ok, "{}", report.summary());

        // Start times are tight: every non-source node starts exactly when
        // its latest predecessor finishes, and no edge is violated.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let profile = random_profile(&dag, &mut rng);
        let eval = MakespanEvaluator::new(&dag).unwrap();
        let w = eval.weights_from(&profile.max_durations()).unwrap();
        let st = eval.eval(&w);
        for j in 0..dag.num_nodes() {
            let preds = dag.predecessors(j);
            if preds.is_empty() {
                prop_assert_eq!(j, dag.source());
                continue;
            }
            let latest = preds.iter().map(|&i| st.start[i] + w[i]).fold(f64::MIN, f64::max);
            prop_assert_eq!(st.start[j], latest);
        }

        // Makespan is monotone in durations and bracketed by the envelopes.
        let lo = eval.eval(&eval.weights_from(&profile.min_durations()).unwrap()).makespan;
        prop_assert!(lo <= st.makespan);
    }
}
