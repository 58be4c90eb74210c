mod common;

use common::criteria::{self, attack_workload, digest, ALL_LOSSES};
use proptest::prelude::*;
use segattack::attack::{attack_batch_with_workers, run_attack, AttackConfig};
use segattack::schedules::EpsPhases;

#[test]
fn every_output_is_feasible() {
    let runs = criteria::determinism_runs(1);
    let (n, bad) = criteria::feasibility(&runs);
    assert!(n >= 200);
    assert_eq!(bad, 0);
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let (model, samples) = attack_workload(6, 12);
    for loss in ALL_LOSSES {
        let cfg = AttackConfig::new(loss, 8.0 / 255.0, 15);
        let run = |w| {
            let r = attack_batch_with_workers(&model, &samples, &cfg, w).unwrap();
            digest(&r.into_iter().map(Result::unwrap).collect::<Vec<_>>())
        };
        assert_eq!(run(1), run(3), "{loss}");
    }
}

#[test]
fn best_trace_is_monotone_and_ends_at_best_loss() {
    let (model, samples) = attack_workload(4, 12);
    for loss in ALL_LOSSES {
        for s in &samples {
            let r = run_attack(&model, &s.image, &s.labels, &AttackConfig::new(loss, 4.0 / 255.0, 25), 0).unwrap();
            assert!(r.best_trace.windows(2).all(|w| w[1] >= w[0]), "{loss}");
            assert_eq!(*r.best_trace.last().unwrap(), r.best_loss);
            assert_eq!(r.iterations_used, 25);
            assert!(r.aborted.is_none());
        }
    }
}

#[test]
fn restarts_never_lower_the_best_loss() {
    let (model, samples) = attack_workload(3, 12);
    for s in &samples {
        let one = AttackConfig::new(ALL_LOSSES[0], 8.0 / 255.0, 10);
        let three = AttackConfig { restarts: 3, ..one.clone() };
        let a = run_attack(&model, &s.image, &s.labels, &one, 0).unwrap();
        let b = run_attack(&model, &s.image, &s.labels, &three, 0).unwrap();
        assert!(b.best_loss >= a.best_loss);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attacks_stay_in_the_ball(
        loss_index in 0usize..ALL_LOSSES.len(),
        eps_255 in 0.25f64..16.0,
        iters in 1usize..12,
        seed in any::<u64>(),
        single in any::<bool>(),
    ) {
        let (model, image, labels) = criteria::toy_instance();
        let eps = eps_255 / 255.0;
        let cfg = AttackConfig {
            seed,
            phases: if single { EpsPhases::single() } else { EpsPhases::default() },
            ..AttackConfig::new(ALL_LOSSES[loss_index], eps, iters)
        };
        let r = run_attack(&model, &image, &labels, &cfg, 0).unwrap();
        prop_assert!(r.feasible);
        for (a, o) in r.adversarial.data().iter().zip(image.data()) {
            prop_assert!((0.0..=1.0).contains(a));
            prop_assert!((*a as f64 - *o as f64).abs() <= eps + 1e-6);
        }
        let again = run_attack(&model, &image, &labels, &cfg, 0).unwrap();
        prop_assert_eq!(again, r);
    }
}
