mod common;

use common::{leapfrog_errors, observed_orders, operator_error};

#[test]
fn operator_is_second_order_in_spacing() {
    let errors: Vec<f64> = [0.5, 0.25, 0.125].iter().map(|&h| operator_error(h)).collect();
    for order in observed_orders(&errors) {
        assert!(order >= 1.8, "errors {errors:?}");
    }
}

#[test]
fn leapfrog_is_second_order_in_time() {
    let errors = leapfrog_errors(&[4, 8, 16, 32]);
    for order in observed_orders(&errors) {
        assert!(order >= 1.8, "errors {errors:?}");
    }
    assert!(errors[3] < 1e-2);
}
