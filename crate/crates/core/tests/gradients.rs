use scseg::gradcheck::{run_scope, DEFAULT_STEP, OP_SCOPES, TOLERANCE};

fn assert_scope(scope: &str) {
    for report in run_scope(scope, DEFAULT_STEP, 7).unwrap() {
        for g in &report.groups {
            assert!(
                g.max_rel_err < TOLERANCE && g.checked > 0,
                "{} / {}: max rel err {:.3e} over {} probes ({} skipped)",
                report.scope,
                g.name,
                g.max_rel_err,
                g.checked,
                g.skipped
            );
        }
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    for op in OP_SCOPES {
        assert_scope(op);
    }
}

#[test]
fn sc_conv_module_matches_finite_differences() {
    assert_scope("scconv");
}

#[test]
fn tiny_unet_matches_finite_differences() {
    assert_scope("unet-tiny");
}
