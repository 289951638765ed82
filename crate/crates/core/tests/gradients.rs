mod support;

use support::gradients::suite;

#[test]
fn every_primitive_and_composed_loss_matches_finite_differences() {
    let results = suite();
    for (name, err) in &results {
        println!("{name:<28} {err:.3e}");
    }
    let failing: Vec<_> = results
        .iter()
        .filter(|(_, e)| e.is_nan() || *e >= 1e-6)
        .collect();
    assert!(failing.is_empty(), "failing checks: {failing:?}");
}

/// Parameter gradients of the composed losses. Central differences carry
/// roughly one ulp of the loss divided by `2 eps` (about 1e-12 here), so
/// coordinates whose gradient is itself near zero are held to that
/// absolute floor instead of the relative bound.
#[test]
fn composed_loss_parameter_gradients_match_finite_differences() {
    use support::gradients::{param_pairs, CdaeCase, FusionCase, CONFIGS};
    let tolerance = |a: f64| 1e-6 * a.abs() + 1e-9;
    for seed in 0..CONFIGS {
        let cdae = CdaeCase::new(seed);
        let loss = |t: &mut cdae::tensor::Tape, x| cdae.loss(t, x);
        for (name, p) in cdae::nn::Parameters::params(&cdae.ae) {
            for (i, (a, n)) in param_pairs(&loss, &cdae.x, p)
                .unwrap()
                .into_iter()
                .enumerate()
            {
                assert!(
                    (a - n).abs() <= tolerance(a),
                    "cdae seed {seed} {name}[{i}]: {a:e} vs {n:e}"
                );
            }
        }
        let fusion = FusionCase::new(seed);
        let loss = |t: &mut cdae::tensor::Tape, x| fusion.loss(t, x);
        for (name, p) in fusion.trainable() {
            for (i, (a, n)) in param_pairs(&loss, &fusion.x, p)
                .unwrap()
                .into_iter()
                .enumerate()
            {
                assert!(
                    (a - n).abs() <= tolerance(a),
                    "fusion seed {seed} {name}[{i}]: {a:e} vs {n:e}"
                );
            }
        }
    }
}
