//! Tape gradients against central finite differences on 8x8 inputs.

mod common;

use common::{composite_graph_error, gradient_error, random, scalar_fn, thick_mask};
use gradpaint::denoisers::{gmm_eps, GmmPrior};
use gradpaint::losses::{alignment_loss, collage, masked_mse, total_loss, LossTarget};
use gradpaint::schedule::{estimate_x0, make_linear_schedule};

const TOL: f64 = 1e-4;
use common::FD_STEP as H;

#[test]
fn random_composite_graphs() {
    for graph in 0..20u64 {
        let err = composite_graph_error(graph);
        assert!(err < TOL, "graph {graph}: {err:e}");
    }
}

#[test]
fn masked_mse_gradient() {
    for seed in 0..5 {
        let target = random(&[8, 8, 1], 10 + seed);
        let mask = thick_mask(seed);
        let err = gradient_error(
            |v| masked_mse(v, v.constant(target.clone()), &mask).unwrap(),
            &random(&[8, 8, 1], seed),
            H,
        );
        assert!(err < TOL, "{err:e}");
    }
}

#[test]
fn alignment_loss_gradient() {
    for seed in 0..5 {
        let mask = thick_mask(seed);
        for channels in [1, 3] {
            let x = random(&[8, 8, channels], 20 + seed);
            let err = gradient_error(|v| alignment_loss(v, &mask).unwrap(), &x, H);
            assert!(err < TOL, "seed {seed} c {channels}: {err:e}");
        }
    }
}

#[test]
fn total_loss_gradient_on_the_collage() {
    for seed in 0..5 {
        let image = random(&[8, 8, 1], 30 + seed);
        let mask = thick_mask(seed);
        for target in [LossTarget::Collage, LossTarget::RawX0Hat] {
            let f = scalar_fn(|v| {
                let img = v.constant(image.clone());
                total_loss(img, v, &mask, 400.0, true, target).unwrap().total
            });
            let err = gradient_error(f, &random(&[8, 8, 1], 40 + seed), H);
            assert!(err < TOL, "{target:?}: {err:e}");
        }
        let f = scalar_fn(|v| collage(v, v.constant(image.clone()), &mask).unwrap().square().sum());
        assert!(gradient_error(f, &random(&[8, 8, 1], 50 + seed), H) < TOL);
    }
}

fn mixture(seed: u64) -> GmmPrior {
    let means = (0..3)
        .map(|k| random(&[8, 8, 1], 60 + 3 * seed + k).map(|v| 0.5 * v))
        .collect();
    GmmPrior::new(vec![0.2, 0.3, 0.5], means, 0.3).unwrap()
}

#[test]
fn through_the_mixture_denoiser() {
    let s = make_linear_schedule(100).unwrap();
    for (seed, t) in [(0u64, 100usize), (1, 60), (2, 30), (3, 10), (4, 1)] {
        let prior = mixture(seed);
        let image = random(&[8, 8, 1], 70 + seed);
        let mask = thick_mask(seed);
        let probe = random(&[8, 8, 1], 80 + seed);
        let eps_only = scalar_fn(|v| {
            let e = gmm_eps(&prior, v, t, &s, None).unwrap();
            e.mul(v.constant(probe.clone())).unwrap().sum()
        });
        let full = scalar_fn(|v| {
            let e = gmm_eps(&prior, v, t, &s, None).unwrap();
            let x0 = estimate_x0(v, e, t, &s).unwrap();
            total_loss(v.constant(image.clone()), x0, &mask, 400.0, true, LossTarget::Collage)
                .unwrap()
                .total
        });
        let x = random(&[8, 8, 1], 90 + seed);
        let e1 = gradient_error(eps_only, &x, H);
        let e2 = gradient_error(full, &x, H);
        assert!(e1 < TOL && e2 < TOL, "t {t}: eps {e1:e}, loss {e2:e}");
    }
}

#[test]
fn the_check_catches_a_detached_factor() {
    // The tape sees x * c with c a constant copy of x: gradient x instead of 2x.
    let err = gradient_error(
        |v| v.mul(v.constant(v.value())).unwrap().sum(),
        &random(&[8, 8, 1], 99),
        H,
    );
    assert!(err > 0.4, "{err}");
}

mod linearity {
    use super::*;
    use gradpaint::tensor::Tape;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

        #[test]
        fn gradient_of_a_weighted_sum(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let x = random(&[8, 8, 1], seed);
            let mask = thick_mask(seed);
            let grad = |wa: f64, wb: f64| {
                let tape = Tape::new();
                let v = tape.leaf(x.clone());
                let out = alignment_loss(v, &mask).unwrap().scale(wa)
                    .add(v.square().sum().scale(wb)).unwrap();
                out.backward().unwrap().get(v).unwrap().clone()
            };
            let combined = grad(a, b);
            let (ga, gb) = (grad(1.0, 0.0), grad(0.0, 1.0));
            for i in 0..x.numel() {
                let expect = a * ga.data()[i] + b * gb.data()[i];
                prop_assert!((combined.data()[i] - expect).abs() < 1e-9 * (1.0 + expect.abs()));
            }
        }
    }
}
