use manifold_flow::check::{run_checks, CheckConfig};

#[test]
fn clean_build_passes_every_check() {
    let results = run_checks(&CheckConfig { cases: 5, ..CheckConfig::default() }, false).unwrap();
    for r in &results {
        println!("{} worst={:e} bound={:e} cases={}", r.name, r.worst, r.bound, r.cases);
    }
    let failed: Vec<_> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}

#[test]
fn removing_the_scale_clamp_breaks_coupling_log_dets() {
    let results = run_checks(&CheckConfig { cases: 5, ..CheckConfig::default() }, true).unwrap();
    let coupling: Vec<_> = results.iter().filter(|r| r.name.starts_with("log-det Coupling")).collect();
    assert!(!coupling.is_empty());
    assert!(coupling.iter().all(|r| !r.passed), "{coupling:?}");
}
