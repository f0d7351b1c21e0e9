mod support;

use support::*;

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-4;

#[test]
fn every_primitive_matches_central_differences() {
    for (name, make, op) in primitives() {
        for seed in 0..INSTANCES {
            let err = input_grad_error(&make(&mut rng(seed)), op);
            assert!(err < TOL, "{name} instance {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn composite_loss_matches_central_differences() {
    for seed in 0..INSTANCES {
        let err = composite_grad_error(seed);
        assert!(err < TOL, "instance {seed}: relative error {err:e}");
    }
}
