//! Property-based invariants of the schedule, sampler ladder, classifier and
//! metrics.

use difscil::eval::{summarize, ClassCount, SessionResult};
use difscil::heads::{classify, EtfPrototypes};
use difscil::protocol::{beta_schedule, DistillSchedule};
use difscil::{BackboneHandle, TimestepGrid};
use proptest::prelude::*;

proptest! {
    #[test]
    fn beta_is_monotone_and_bounded(beta_init in 0.0f64..=1.0, sessions in 1usize..20) {
        let sched = DistillSchedule { beta_init, sessions };
        let mut prev = beta_init;
        for s in 1..=sessions {
            let b = beta_schedule(s, &sched).unwrap();
            prop_assert!(b >= prev - 1e-15);
            prop_assert!(b >= beta_init - 1e-15 && b <= 1.0 + 1e-15);
            prev = b;
        }
        prop_assert_eq!(beta_schedule(sessions, &sched).unwrap(), 1.0);
    }

    #[test]
    fn ladder_is_strictly_decreasing(start in 1usize..2000, steps in 1usize..100) {
        let l = BackboneHandle::ladder(start, steps);
        prop_assert_eq!(l[0], start);
        prop_assert_eq!(*l.last().unwrap(), 0);
        prop_assert_eq!(l.len(), steps.min(start) + 1);
        prop_assert!(l.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn grid_ends_at_t_max(m in 2usize..8, t_max in 50usize..1500) {
        let g = TimestepGrid::new(m, t_max).unwrap();
        prop_assert_eq!(g.values.len(), m);
        prop_assert_eq!(*g.values.last().unwrap(), t_max);
        prop_assert!(g.values.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn classify_matches_linear_scan_and_ignores_scale(
        k in 2usize..12,
        seed in 0u64..1000,
        h in prop::collection::vec(-1.0f64..1.0, 12),
        scale in 0.01f64..100.0,
        mask in prop::collection::vec(any::<bool>(), 12),
    ) {
        let d = 12;
        let etf = EtfPrototypes::new(k, d, seed).unwrap();
        let mut allowed: Vec<usize> = (0..k).filter(|&c| mask[c]).collect();
        if allowed.is_empty() {
            allowed.push(k - 1);
        }
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for &c in &allowed {
            let s: f64 = (0..d).map(|j| etf.w[[j, c]] * h[j]).sum();
            if s > best.1 {
                best = (c, s);
            }
        }
        prop_assert_eq!(classify(&h, &etf, &allowed).unwrap(), best.0);
        let scaled: Vec<f64> = h.iter().map(|v| v * scale).collect();
        prop_assert_eq!(classify(&scaled, &etf, &allowed).unwrap(), best.0);
    }

    #[test]
    fn average_accuracy_is_mean_of_sessions(
        counts in prop::collection::vec(prop::collection::vec((0usize..20, 1usize..20), 1..6), 1..8),
    ) {
        let results: Vec<SessionResult> = counts
            .iter()
            .enumerate()
            .map(|(s, cs)| {
                SessionResult::from_counts(
                    s,
                    cs.iter()
                        .enumerate()
                        .map(|(c, &(a, b))| ClassCount { class_id: c, correct: a.min(b), total: b })
                        .collect(),
                )
            })
            .collect();
        let mean = results.iter().map(|r| r.acc).sum::<f64>() / results.len() as f64;
        let s = summarize("p", 0, results, &[0], None).unwrap();
        prop_assert!((s.aa - mean).abs() < 1e-9);
        prop_assert!(s.sessions.iter().all(|r| (0.0..=100.0).contains(&r.acc)));
    }
}
