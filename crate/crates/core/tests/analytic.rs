mod common;

use common::criteria;

#[test]
fn analytic_anchors() {
    let o = criteria::analytic();
    assert!(o.pass, "{}", o.line());
}
