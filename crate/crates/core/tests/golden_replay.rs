use radixflow::golden::{replay, Scenario};

fn scenario() -> Scenario {
    Scenario::from_json(include_str!("data/walkthrough.json")).unwrap()
}

#[test]
fn walkthrough_matches_golden() {
    let report = replay(&scenario()).unwrap();
    assert!(report.matches(), "{:#?}", report.diffs);
}

#[test]
fn tampered_expectation_is_reported() {
    let mut sc = scenario();
    sc.steps[4].expect.evictions.clear();
    let report = replay(&sc).unwrap();
    assert_eq!(report.diffs.len(), 1);
    assert!(report.diffs[0].starts_with("step 5"));
}
