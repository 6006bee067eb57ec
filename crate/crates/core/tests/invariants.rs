use arachne_core::agents::{q_update, rules_step, select_action, QLearningParams, QTable};
use arachne_core::analysis::{kmeans, wilcoxon_signed_rank_with, WilcoxonMethod};
use arachne_core::content::{Action, Attribute, Direction, SpiderConfig, StateIndex};
use arachne_core::patient::{persona, random_patient};
use arachne_core::reward::AnxietyLevel;
use arachne_core::rng::stream;
use arachne_core::session::{replay, run_session, PatientSource, SessionParams, SessionPlan};
use arachne_core::signals::{scl_level, Calibration, EdaSample};
use arachne_core::MethodTag;
use proptest::prelude::*;

fn config() -> impl Strategy<Value = SpiderConfig> {
    (0usize..486).prop_map(|i| SpiderConfig::decode(StateIndex::new(i).unwrap()))
}

fn action() -> impl Strategy<Value = Action> {
    (0usize..12).prop_map(|i| Action::from_index(i).unwrap())
}

fn level() -> impl Strategy<Value = AnxietyLevel> {
    (0i64..=10).prop_map(|v| AnxietyLevel::new(v).unwrap())
}

fn opposite(a: Action) -> Action {
    let d = match a.direction {
        Direction::Increase => Direction::Decrease,
        Direction::Decrease => Direction::Increase,
    };
    Action::new(a.attribute, d)
}

proptest! {
    #[test]
    fn applying_then_undoing_is_identity(c in config(), a in action()) {
        if let Ok(next) = c.apply(a) {
            prop_assert_eq!(next.apply(opposite(a)).unwrap(), c);
            prop_assert!(next.can_apply(opposite(a)));
        } else {
            prop_assert!(!c.legal_actions().contains(&a));
        }
    }

    #[test]
    fn normalized_vector_stays_in_unit_cube(c in config()) {
        for (x, a) in c.normalized_vector().iter().zip(Attribute::ALL) {
            prop_assert!((0.0..=1.0).contains(x));
            prop_assert_eq!((*x * a.max_value() as f64).round() as u8, c.get(a));
        }
    }

    #[test]
    fn rules_move_against_the_error(c in config(), cur in level(), des in level(), seed in any::<u64>()) {
        let d = rules_step(cur, des, c, &mut stream(seed, "p", 0));
        match d.action {
            None => prop_assert!(cur == des || d.new_config == c),
            Some(a) => {
                let want = if cur > des { Direction::Decrease } else { Direction::Increase };
                prop_assert_eq!(a.direction, want);
                prop_assert_eq!(c.apply(a).unwrap(), d.new_config);
            }
        }
    }

    #[test]
    fn selection_is_always_legal(c in config(), eps in 0.0f64..=1.0, seed in any::<u64>(), fill in any::<u64>()) {
        let mut q = QTable::new();
        let mut rng = stream(fill, "fill", 0);
        for a in Action::all() {
            q.set(c.encode(), a, rand::Rng::random_range(&mut rng, -1.0..1.0));
        }
        let legal = c.legal_actions();
        let a = select_action(&q, c.encode(), &legal, eps, &mut stream(seed, "p", 1)).unwrap();
        prop_assert!(legal.contains(&a));
    }

    #[test]
    fn q_values_stay_bounded(steps in prop::collection::vec((0usize..486, action(), -1.0f64..=1.0), 1..200)) {
        // With rewards in [-1, 1] every entry stays within 1 / (1 - gamma).
        let params = QLearningParams::default();
        let bound = 1.0 / (1.0 - params.gamma) + 1e-9;
        let mut q = QTable::new();
        for (s, a, r) in steps {
            let c = SpiderConfig::decode(StateIndex::new(s).unwrap());
            let next = c.apply(a).unwrap_or(c);
            q_update(&mut q, c.encode(), a, r, next.encode(), &params);
        }
        prop_assert!(q.values().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn scl_level_is_monotone(base in 0.5f64..5.0, span in 0.5f64..8.0, x in 0.0f64..10.0, y in 0.0f64..10.0) {
        let at = |v: f64| {
            let mut cal = Calibration::new(base, span).unwrap();
            scl_level(&[EdaSample::new(1.0, base + v)], &mut cal).unwrap()
        };
        let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
        prop_assert!(at(lo) <= at(hi));
    }

    #[test]
    fn wilcoxon_swapping_sides_swaps_tails(xs in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 3..15)) {
        let swapped: Vec<_> = xs.iter().map(|(a, b)| (*b, *a)).collect();
        if let (Ok(a), Ok(b)) = (
            wilcoxon_signed_rank_with(&xs, WilcoxonMethod::Exact),
            wilcoxon_signed_rank_with(&swapped, WilcoxonMethod::Exact),
        ) {
            prop_assert!((a.p_less - b.p_greater).abs() < 1e-12);
            prop_assert!((a.p_two_sided - b.p_two_sided).abs() < 1e-12);
            prop_assert!(a.p_two_sided > 0.0 && a.p_two_sided <= 1.0);
        }
    }

    #[test]
    fn kmeans_assigns_each_point_to_its_nearest_centroid(
        points in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 4..40),
        k in 1usize..4,
        seed in any::<u64>(),
    ) {
        let model = kmeans(&points, k, seed, 100).unwrap();
        for (p, a) in points.iter().zip(&model.assignments) {
            prop_assert_eq!(model.nearest(p), *a);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn simulated_sessions_replay_cleanly(seed in any::<u64>(), id in 0usize..8, rl_first in any::<bool>()) {
        let model = if id == 7 { random_patient(seed) } else { persona(id).unwrap() };
        let first = if rl_first { MethodTag::Rl } else { MethodTag::Rules };
        let trace = run_session(
            Box::new(PatientSource::new(model, seed)),
            SessionPlan::standard(first),
            SessionParams::default(),
            seed,
        ).unwrap();
        let report = replay(&trace, 1e-12).unwrap();
        prop_assert_eq!(report.steps_checked, trace.steps.len());
        for w in trace.steps.windows(2) {
            prop_assert!(w[1].t > w[0].t);
            if w[0].phase == w[1].phase && !w[0].terminal {
                let moved = w[0].config.values().iter().zip(w[1].config.values()).filter(|(a, b)| **a != *b).count();
                prop_assert!(moved <= 1);
            }
        }
    }
}
