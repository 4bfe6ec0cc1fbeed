//! Pearson correlation with two-sided p-values, and regret.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub r: f64,
    /// Two-sided p-value of the t-test with `n - 2` degrees of freedom.
    pub p: f64,
    pub n: usize,
}

impl CorrelationReport {
    pub fn p_text(&self) -> String {
        format_p(self.p)
    }
}

/// Renders p-values below 1e-16 as `<1E-16`.
pub fn format_p(p: f64) -> String {
    if p < 1e-16 {
        "<1E-16".to_string()
    } else {
        format!("{p:.3e}")
    }
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<CorrelationReport> {
    if xs.len() != ys.len() {
        return Err(Error::Usage(format!(
            "pearson needs equal lengths, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::Usage(format!("pearson needs at least 3 points, got {n}")));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("pearson input contains non-finite values".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Numeric("undefined correlation: constant sequence".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(CorrelationReport { r, p: two_sided_p(r, n), n })
}

/// `P(|T| >= |t|)` for `t = r sqrt((n-2)/(1-r^2))`, via the regularized
/// incomplete beta `I_{df/(df+t^2)}(df/2, 1/2)`.
fn two_sided_p(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let one_minus = 1.0 - r * r;
    if one_minus <= 0.0 {
        return 0.0;
    }
    let t2 = r * r * df / one_minus;
    beta_reg(df / 2.0, 0.5, df / (df + t2)).clamp(0.0, 1.0)
}

/// Index of the smallest value, first one on ties. NaN never wins.
pub fn argmin_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        match best {
            Some(b) if values[b] <= *v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// `truths[argmin bounds] - min(truths)`.
pub fn regret(bounds: &[f64], truths: &[f64]) -> Result<f64> {
    if bounds.len() != truths.len() || bounds.is_empty() {
        return Err(Error::Usage(format!(
            "regret needs equal non-empty lengths, got {} and {}",
            bounds.len(),
            truths.len()
        )));
    }
    let i = argmin_first(bounds).ok_or_else(|| Error::Numeric("all bounds are NaN".into()))?;
    let best = truths.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(truths[i] - best)
}
