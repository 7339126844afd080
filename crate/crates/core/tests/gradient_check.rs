//! Analytic gradients of the combined loss against central differences on a
//! toy model, one check per parameter group.

#[path = "support/gradcheck.rs"]
mod gradcheck;

#[test]
fn every_parameter_group_matches_finite_differences() {
    let (len, groups) = gradcheck::run(5);
    assert!(len <= 16);
    let mut worst = 0.0f64;
    for g in &groups {
        println!("{:<20} |g| {:.3e} rel {:.2e}", g.group, g.norm, g.rel);
        assert!(g.norm > 0.0, "{} has no gradient signal", g.group);
        assert!(
            g.rel <= gradcheck::TOLERANCE,
            "{}: relative error {:.3e}",
            g.group,
            g.rel
        );
        worst = worst.max(g.rel);
    }
    println!("worst relative error {worst:.3e}");
}
