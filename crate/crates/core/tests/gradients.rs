mod common;

use common::*;

#[test]
fn every_parameter_matches_central_differences() {
    for seed in 0..5 {
        let (scene, cam) = smooth_scene(4, seed);
        let (e, t, i, a, n) = worst_gradient_error(&scene, &cam, seed);
        assert!(
            e < 1e-4,
            "seed {seed}: tensor {t} entry {i}: analytic {a} numeric {n} (rel {e})"
        );
    }
}
