use newscap_core::gradcheck::{model_check, op_suite, GradCheck};

#[test]
fn every_graph_op_matches_central_differences() {
    for seed in [1, 2] {
        for op in op_suite(seed).unwrap() {
            assert!(op.result.checked > 0, "{} checked nothing", op.name);
            assert_eq!(op.result.passed, op.result.checked, "{} (seed {seed}): {:?}", op.name, op.result);
        }
    }
}

#[test]
fn full_model_step_matches_central_differences() {
    let r: GradCheck = model_check(3, 12).unwrap();
    assert!(r.checked > 500, "{r:?}");
    assert!(r.pass_fraction() >= 0.99, "{r:?}");
}
