mod support;

use proptest::prelude::*;

fn ok(c: support::Check) -> Result<(), TestCaseError> {
    c.map_err(TestCaseError::fail)
}

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, failure_persistence: None, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn excursions_nest(seed in any::<u64>(), n in 16usize..19, r in 1usize..3, extra in 1usize..3) {
        let small_r = 2 * r + 1;
        ok(support::nesting(n, seed, 40_000, r, small_r, small_r + extra))?;
    }

    #[test]
    fn uncovered_set_shrinks(seed in any::<u64>(), n in 4usize..9, t1 in 0u64..3000, t2 in 0u64..3000) {
        ok(support::uncovered_monotone(n, seed, t1, t2))?;
    }

    #[test]
    fn replay_is_deterministic(seed in any::<u64>(), n in 4usize..8, replica in 0u64..1000) {
        ok(support::replay(n, seed, replica))?;
    }

    #[test]
    fn geometric_moments_bounded(p in 0.001f64..1.0) {
        ok(support::geometric_moments(p))?;
    }

    #[test]
    fn counter_monotone(seed in any::<u64>(), t1 in 0u64..30_000, t2 in 0u64..30_000, extra in 1usize..3) {
        ok(support::counter_monotone(12, seed, t1, t2, 1, 3, 3 + extra))?;
    }
}

proptest! {
    #![proptest_config(config(4))]

    #[test]
    fn bernoulli_field_law(p in 0.35f64..0.65, seed in any::<u64>()) {
        ok(support::bernoulli_law(p, seed, 50_000))?;
    }

    #[test]
    fn uniform_subset_law(m in 1usize..8, seed in any::<u64>()) {
        ok(support::uniform_subset_law(m, seed, 20_000))?;
    }

    #[test]
    fn mixing_is_submultiplicative(n in 3usize..7, laziness in 0.1f64..0.5) {
        ok(support::mixing_submultiplicative(n, laziness, 40))?;
    }
}

#[test]
fn thresholds_are_ordered() {
    for d in 3..=12 {
        support::thresholds_ordered(d).unwrap();
    }
}
