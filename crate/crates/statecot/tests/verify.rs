use statecot::verify::{all_pass, run_all};

#[test]
fn every_oracle_passes() {
    let checks = run_all(0);
    for c in &checks {
        println!("{}", c.line());
    }
    assert!(checks.len() >= 25);
    all_pass(&checks).unwrap();
}
