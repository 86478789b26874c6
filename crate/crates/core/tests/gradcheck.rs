mod common;

use toolrec::attrtool::FineTuneMode;

#[test]
fn frozen_backbone_attr_and_fusion_gradients() {
    let errs = common::gradcheck(FineTuneMode::Frozen);
    assert!(errs.iter().any(|(n, _)| n == "fusion.weight"));
    for (name, e) in &errs {
        assert!(*e < common::GRAD_TOL, "{name}: relative error {e:.3e}");
    }
}

#[test]
fn full_mode_gradients() {
    for (name, e) in common::gradcheck(FineTuneMode::Full) {
        assert!(e < common::GRAD_TOL, "{name}: relative error {e:.3e}");
    }
}
