use damim_core::modelcheck::model_suite;
use damim_core::tensor::gradcheck::{op_suite, REL_TOL};

#[test]
fn every_op_matches_finite_differences() {
    let checks = op_suite(7, 3).unwrap();
    assert!(checks.len() >= 20, "only {} ops covered", checks.len());
    for c in &checks {
        assert!(c.passed(), "{} rel err {:e}", c.op, c.max_rel_err);
    }
}

#[test]
fn composed_models_match_finite_differences() {
    for c in model_suite(3, 3).unwrap() {
        assert!(c.max_rel_err < REL_TOL, "{} rel err {:e}", c.op, c.max_rel_err);
    }
}

#[test]
fn checker_flags_a_wrong_gradient() {
    use damim_core::tensor::gradcheck::check;
    use damim_core::tensor::Tensor;
    let x = Tensor::from_vec(&[3], vec![0.5, -1.2, 2.0]).unwrap();
    // value depends on x twice but only one path is differentiated
    let err = check(&[x], &[true], &|g, v| {
        let d = g.detach(v[0]);
        let p = g.mul(v[0], d)?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(err > 0.1, "rel err {err}");
}
