//! Exact mixture scores against finite differences of the closed-form
//! log-density.

mod common;

use common::{numeric_eps, score_error};

use gradpaint::denoisers::{gmm_eps, GmmPrior};
use gradpaint::schedule::make_linear_schedule;
use gradpaint::tensor::{Tape, Tensor};

#[test]
fn score_matches_the_log_density_on_random_triples() {
    let s = make_linear_schedule(100).unwrap();
    for triple in 0..100u64 {
        let err = score_error(triple, &s);
        assert!(err < 1e-5, "triple {triple}: {err:e}");
    }
}

#[test]
fn conditioned_score_uses_one_component() {
    let s = make_linear_schedule(100).unwrap();
    let means = vec![Tensor::full(&[4], 1.0), Tensor::full(&[4], -1.0)];
    let prior = GmmPrior::new(vec![0.5, 0.5], means, 0.5).unwrap();
    let x = Tensor::from_slice(&[0.3, -0.2, 0.1, 0.0]);
    let tape = Tape::no_grad();
    for k in 0..2 {
        let got = gmm_eps(&prior, tape.constant(x.clone()), 40, &s, Some(k))
            .unwrap()
            .value();
        let ab = s.alpha_bar(40);
        let expect = numeric_eps(&prior.component(k).unwrap(), &x, ab, 1e-5);
        for (g, e) in got.data().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-8, "{g} vs {e}");
        }
    }
}
