//! One-sided paired t-test.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    /// p-value of `H1: mean(a - b) > 0`.
    pub p_value: f64,
}

/// Tests whether `a` exceeds `b` on average, pairing entries by index.
///
/// With zero spread the statistic is infinite: `p = 0` for a positive mean
/// difference and `p = 1` otherwise.
pub fn paired_t_greater(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::invalid(
            "paired_t_greater",
            format!("{} vs {} observations", a.len(), b.len()),
        ));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::invalid("paired_t_greater", "need at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    if se == 0.0 {
        let (t, p) = if mean > 0.0 {
            (f64::INFINITY, 0.0)
        } else {
            (if mean < 0.0 { f64::NEG_INFINITY } else { 0.0 }, 1.0)
        };
        return Ok(PairedTest {
            n,
            mean_diff: mean,
            t,
            p_value: p,
        });
    }
    let t = mean / se;
    let dist =
        StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::invalid("paired_t_greater", e.to_string()))?;
    Ok(PairedTest {
        n,
        mean_diff: mean,
        t,
        p_value: 1.0 - dist.cdf(t),
    })
}
