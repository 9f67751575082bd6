use std::sync::Arc;

use proptest::prelude::*;
use radixflow::oracles::scheduler_fuzz;
use radixflow::pool_sched::{RequestSpec, Scheduler, SchedulerConfig};
use radixflow::{MockModel, Vocabulary};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pins_survive_and_pool_balances(seed in any::<u64>(), n in 1usize..50) {
        scheduler_fuzz(seed, n).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn identical_runs_are_identical(seed in 0u64..1000) {
        let run = || {
            let mut s = Scheduler::new(SchedulerConfig { capacity: 200, ..Default::default() }, MockModel::new(Arc::new(Vocabulary::build(0, 16)), seed));
            for i in 0..12u32 {
                let input: Vec<u32> = (0..20 + i % 5).map(|t| (t * (1 + i % 3)) % 7).collect();
                s.submit(RequestSpec::new(input, (i % 4) as usize).at((i * 3) as u64)).unwrap();
            }
            let done = s.run_to_completion().unwrap();
            (done, s.metrics(), s.steps().to_vec())
        };
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn many_fuzzed_schedules() {
    for seed in 0..200 {
        scheduler_fuzz(seed, 60).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    }
}
