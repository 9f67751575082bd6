mod common;

use common::{build_index, decode_pair, reference_regex, vocab, PATTERNS};
use proptest::prelude::*;
use radixflow::fsm::{compile_regex, constrained_decode, DecodeMode};

#[test]
fn compressed_and_naive_agree_on_the_corpus() {
    let v = vocab();
    for p in PATTERNS {
        let ix = build_index(p, v.clone());
        let re = reference_regex(p);
        for seed in 0..20 {
            let o = decode_pair(&ix, &re, seed).unwrap_or_else(|e| panic!("{p} seed {seed}: {e}"));
            assert_eq!(o.compressed_text, o.naive_text, "{p} seed {seed}");
            assert!(o.matches_reference_regex, "{p} seed {seed}: {:?}", String::from_utf8_lossy(&o.compressed_text));
            assert!(o.compressed_passes <= o.naive_passes, "{p} seed {seed}");
            assert!(o.trace_matches_encoding, "{p} seed {seed}");
        }
    }
}

#[test]
fn off_mode_is_the_naive_decoder() {
    let v = vocab();
    let model = radixflow::experiment::EngineConfig::default().model();
    for p in PATTERNS {
        let ix = build_index(p, v.clone());
        let off = constrained_decode(&model, &ix, 256, DecodeMode::Off).unwrap();
        let naive = radixflow::oracles::naive_constrained_decode(&model, ix.dfa(), &v, 256).unwrap();
        assert_eq!(off.text, naive.0, "{p}");
        assert_eq!(off.forward_passes, naive.2, "{p}");
    }
}

fn literal() -> impl Strategy<Value = String> {
    proptest::collection::vec(prop::sample::select(b"abcxyz019 -".to_vec()), 1..6).prop_map(|b| String::from_utf8(b).unwrap())
}

fn pattern() -> impl Strategy<Value = String> {
    let leaf = prop_oneof![literal(), Just("[a-c]".to_string()), Just(r"\d".to_string()), Just("[xyz0-3]".to_string()),];
    leaf.prop_recursive(3, 12, 3, |inner| {
        prop_oneof![
            proptest::collection::vec(inner.clone(), 2..4).prop_map(|v| v.concat()),
            proptest::collection::vec(inner.clone(), 2..4).prop_map(|v| format!("({})", v.join("|"))),
            inner.clone().prop_map(|p| format!("({p})?")),
            inner.clone().prop_map(|p| format!("({p}){{1,3}}")),
        ]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn automaton_language_matches_reference(p in pattern(), probes in proptest::collection::vec(proptest::collection::vec(prop::sample::select(b"abcxyz0123 -".to_vec()), 0..12), 32)) {
        let dfa = compile_regex(&p).unwrap();
        let re = reference_regex(&p);
        for s in &probes {
            prop_assert_eq!(dfa.accepts(s), re.is_match(s), "{} on {:?}", p, String::from_utf8_lossy(s));
        }
    }

    #[test]
    fn random_patterns_decode_identically(p in pattern(), seed in 0u64..1000) {
        let ix = build_index(&p, vocab());
        let o = decode_pair(&ix, &reference_regex(&p), seed).unwrap();
        prop_assert_eq!(&o.compressed_text, &o.naive_text);
        prop_assert!(o.matches_reference_regex);
        prop_assert!(o.compressed_passes <= o.naive_passes);
        prop_assert!(o.trace_matches_encoding);
    }
}
