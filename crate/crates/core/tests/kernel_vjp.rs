use revgnn_core::gradcheck::kernel_checks;

#[test]
fn every_kernel_vjp_matches_central_differences() {
    for seed in [1, 2, 3] {
        let checks = kernel_checks(seed).unwrap();
        assert!(checks.len() > 30);
        let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).map(|c| c.to_string()).collect();
        assert!(failed.is_empty(), "seed {seed}:\n{}", failed.join("\n"));
    }
}
