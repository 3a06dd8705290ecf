//! Weighted isotonic (non-decreasing) least squares by pool-adjacent-violators.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Right-continuous-from-the-left step function: block `b` covers
/// `(knots[b-1], knots[b]]` and takes `values[b]`.
///
/// Evaluation below the first knot returns the first value and above the last
/// knot the last value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
    pub domain_min: f64,
    pub domain_max: f64,
}

impl StepFunction {
    pub fn constant(value: f64) -> Self {
        StepFunction {
            knots: vec![0.0],
            values: vec![value],
            domain_min: 0.0,
            domain_max: 0.0,
        }
    }

    pub fn eval(&self, p: f64) -> f64 {
        let b = self.knots.partition_point(|&k| k < p);
        self.values[b.min(self.values.len() - 1)]
    }

    pub fn n_blocks(&self) -> usize {
        self.values.len()
    }
}

/// Free-function form of [`StepFunction::eval`].
pub fn step_eval(f: &StepFunction, p: f64) -> f64 {
    f.eval(p)
}

/// Fits the non-decreasing function of `x` minimising `sum w_i (y_i - m(x_i))^2`.
///
/// Observations sharing an `x` value are merged first (weights summed,
/// responses weight-averaged), so the result is a function of `x`. Each pooled
/// block takes the weighted mean of its responses, which makes the fit
/// preserve the weighted total of `y`.
pub fn weighted_isotonic_fit(x: &[f64], y: &[f64], w: &[f64]) -> Result<StepFunction> {
    let n = x.len();
    if n == 0 {
        return Err(Error::Domain("isotonic fit needs at least one observation".into()));
    }
    if y.len() != n || w.len() != n {
        return Err(Error::Validation(format!(
            "isotonic fit inputs differ in length: x={n}, y={}, w={}",
            y.len(),
            w.len()
        )));
    }
    if x.iter().chain(y).chain(w).any(|v| v.is_nan()) {
        return Err(Error::Validation("NaN in isotonic fit input".into()));
    }
    if let Some(bad) = w.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Validation(format!(
            "isotonic weights must be positive and finite, got {bad}"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));

    // Blocks as (right knot, weight sum, weighted response sum).
    let mut blocks: Vec<(f64, f64, f64)> = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        let xi = x[order[i]];
        let (mut sw, mut swy) = (0.0, 0.0);
        while i < n && x[order[i]] == xi {
            let j = order[i];
            sw += w[j];
            swy += w[j] * y[j];
            i += 1;
        }
        blocks.push((xi, sw, swy));
        while blocks.len() > 1 {
            let (_, w1, s1) = blocks[blocks.len() - 2];
            let (k2, w2, s2) = blocks[blocks.len() - 1];
            if s1 / w1 > s2 / w2 {
                blocks.pop();
                let last = blocks.last_mut().unwrap();
                *last = (k2, w1 + w2, s1 + s2);
            } else {
                break;
            }
        }
    }

    Ok(StepFunction {
        knots: blocks.iter().map(|b| b.0).collect(),
        values: blocks.iter().map(|b| b.2 / b.1).collect(),
        domain_min: x[order[0]],
        domain_max: x[order[n - 1]],
    })
}

/// Fitted values of an isotonic fit at its own training points.
pub fn isotonic_fitted(x: &[f64], y: &[f64], w: &[f64]) -> Result<(Vec<f64>, StepFunction)> {
    let f = weighted_isotonic_fit(x, y, w)?;
    Ok((x.iter().map(|&p| f.eval(p)).collect(), f))
}
