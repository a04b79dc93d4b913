mod common;

use common::LossInstance;
use hardboost::numeric::grad_check;

#[test]
fn full_loss_gradient_matches_finite_differences() {
    for seed in 0..500 {
        let inst = LossInstance::random(seed);
        assert!(inst.scales.iter().any(|&s| s != inst.margin.base_scale));
        let report = grad_check(&inst.model, |m| inst.loss(m), 1e-5).unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}
