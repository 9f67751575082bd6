use std::sync::Arc;

use proptest::prelude::*;
use radixflow::experiment::{run_experiment, EngineConfig};
use radixflow::program::{run_on_endpoint, EndpointConfig, EndpointModel, Op, Program, FIELD_NAMES};
use radixflow::workload::{ChatOutput, WorkloadKind, WorkloadSpec};
use radixflow::Vocabulary;

fn specs(seed: u64) -> Vec<WorkloadSpec> {
    vec![
        WorkloadSpec::new(WorkloadKind::TreeOfThought { trees: 2, branching: 2, depth: 2, system_prompt: 16 }).scale(0.1).seed(seed),
        WorkloadSpec::new(WorkloadKind::MultiTurnChat { sessions: 3, turns: 3, output: ChatOutput::Short, system_prompt: 16 }).seed(seed),
        WorkloadSpec::new(WorkloadKind::JsonDecode { programs: 3, regex: None, doc_len: 16 }).seed(seed),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    // Scheduling choices change timing, never the generated variables.
    #[test]
    fn outputs_do_not_depend_on_engine_features(seed in 0u64..10_000) {
        let base = EngineConfig::default();
        for spec in specs(seed) {
            let full = run_experiment(&spec, &base).unwrap();
            for abl in ["no_parallelism", "no_hint", "no_compression", "fcfs", "no_cache", "no_tree"] {
                let other = run_experiment(&spec, &base.ablation(abl).unwrap()).unwrap();
                prop_assert_eq!(full.results.len(), other.results.len());
                for (a, b) in full.results.iter().zip(&other.results) {
                    prop_assert_eq!(&a.vars, &b.vars, "{} under {}", spec.name(), abl);
                }
            }
        }
    }
}

fn record_program(fields: usize, doc: &str) -> Program {
    let mut ops = vec![Op::extend(format!("{doc}\n{}:", FIELD_NAMES[0]))];
    for (i, f) in FIELD_NAMES.iter().take(fields).enumerate() {
        if i > 0 {
            ops.push(Op::extend(format!("{f}:")));
        }
        ops.push(Op::gen_stop(*f, 24, "\n"));
    }
    Program::new(ops)
}

proptest! {
    #[test]
    fn speculation_never_changes_outputs(fields in 1usize..=5, seed in any::<u64>(), mismatch in any::<bool>(), doc in "[a-z ]{4,40}") {
        let vocab = Arc::new(Vocabulary::build(0, 128));
        let cfg = EndpointConfig { seed, force_mismatch: mismatch, ..Default::default() };
        let mut ep = EndpointModel::new(vocab, cfg);
        let p = record_program(fields, &format!("record {doc}"));
        let spec = run_on_endpoint(&p, &mut ep, true).unwrap();
        let naive = run_on_endpoint(&p, &mut ep, false).unwrap();
        prop_assert_eq!(&spec.vars, &naive.vars);
        prop_assert_eq!(&spec.prompt, &naive.prompt);
        prop_assert_eq!(naive.ledger.calls, fields);
        prop_assert!(spec.ledger.calls <= naive.ledger.calls);
        if mismatch {
            prop_assert_eq!(spec.ledger.calls, naive.ledger.calls);
        }
    }
}
