use connseg::model::{PredictorConfig, Upsample};
use connseg::verify::{gradcheck_suite, GRADCHECK_TOLERANCE};

#[test]
fn suite_passes_on_a_narrow_model() {
    let cfg = PredictorConfig {
        widths: vec![4, 8, 8, 8],
        fusion_rates: vec![1, 2],
        branch_width: 3,
        reduce_width: Some(4),
        ..Default::default()
    };
    let outcomes = gradcheck_suite(&cfg, 0, 1e-5).unwrap();
    let names: Vec<&str> = outcomes.iter().map(|o| o.name.as_str()).collect();
    for want in ["conv2d", "softmax", "bce_with_logits", "nonlocal_block", "connnet_mini+nonlocal", "connnet_mini"] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
    for o in &outcomes {
        assert!(o.report.max_rel_error < GRADCHECK_TOLERANCE, "{}: {:e}", o.name, o.report.max_rel_error);
        assert!(o.passed());
        assert!(o.report.entries_checked > 0);
    }
}

#[test]
fn suite_covers_bilinear_upsampling() {
    let cfg = PredictorConfig {
        widths: vec![2, 2, 2, 2],
        fusion_rates: vec![1],
        branch_width: 2,
        reduce_width: Some(2),
        upsample: Upsample::Bilinear,
        ..Default::default()
    };
    let outcomes = gradcheck_suite(&cfg, 1, 1e-5).unwrap();
    assert!(outcomes.iter().all(|o| o.passed()));
}
