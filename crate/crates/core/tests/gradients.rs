mod common;

use proptest::prelude::*;
use ruleboost::features::SparseVector;
use ruleboost::learner::{kl_divergence, soft_target_loss, WeakModel};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn analytic_gradients_match_central_differences(seed in any::<u64>()) {
        let worst = common::max_gradient_error(&common::grad_fixture(seed));
        prop_assert!(worst <= 1e-4, "relative error {}", worst);
    }

    #[test]
    fn kl_is_non_negative(a in prop::collection::vec(0.01f64..1.0, 2..5), b in prop::collection::vec(0.01f64..1.0, 2..5)) {
        let n = a.len().min(b.len());
        let norm = |v: &[f64]| { let s: f64 = v[..n].iter().sum(); v[..n].iter().map(|x| x / s).collect::<Vec<_>>() };
        let (p, q) = (norm(&a), norm(&b));
        prop_assert!(kl_divergence(&p, &q) >= -1e-12);
        prop_assert!(kl_divergence(&p, &p).abs() <= 1e-12);
    }
}

#[test]
fn l2_gradient_ignores_bias() {
    let mut m = WeakModel::zeros(2, 1);
    m.weights = vec![0.5, -0.5];
    m.bias = vec![3.0, -3.0];
    let x = SparseVector::zeros(1);
    let t = vec![vec![0.5, 0.5]];
    let (_, plain) = soft_target_loss(&m, &[&x], &t, 0.0);
    let (_, reg) = soft_target_loss(&m, &[&x], &t, 0.1);
    assert_eq!(plain.bias, reg.bias);
    assert!((reg.weights[0] - plain.weights[0] - 0.05).abs() < 1e-12);
}
