//! First-order expansion of the mixed auxiliary loss around the unmixed test
//! sample, and measurement of the remainder's scaling law.

use crate::aux_tasks::cross_entropy;
use crate::aux_tasks::AuxCrossEntropy;
use crate::error::{Error, Result};
use crate::mixup::mix_pair;
use crate::network::{Mode, SplitNetworkState};
use crate::tensor::Tensor;

/// Remainders below this are treated as round-off and left out of the fit.
pub const REMAINDER_FLOOR: f64 = 1e-14;

/// A scalar function of one flattened input with an exact gradient.
pub trait ScalarField {
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// `L_t(x) = −log g(x)[label]` for the auxiliary head, eval mode.
pub struct AuxLossField<'a> {
    pub state: &'a SplitNetworkState,
    pub label: usize,
}

impl AuxLossField<'_> {
    fn batch(&self, x: &[f64]) -> Result<Tensor> {
        let (c, h, w) = self.state.spec().input_shape;
        Tensor::new(vec![1, c, h, w], x.to_vec())
    }
}

impl ScalarField for AuxLossField<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        let logits = self.state.forward_aux(&self.batch(x)?, Mode::Eval)?;
        cross_entropy(&logits, &[self.label])
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let labels = [self.label];
        let (_, g) = self.state.grad_input(
            &AuxCrossEntropy { labels: &labels },
            &self.batch(x)?,
            Mode::Eval,
        )?;
        if !g.all_finite() {
            return Err(Error::numerical("input gradient", "non-finite entries"));
        }
        Ok(g.into_data())
    }
}

/// `L(x) = ‖x‖²`, whose expansion remainder is exactly `μ²‖x_i − x_t‖²`.
pub struct Quadratic;

impl ScalarField for Quadratic {
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(x.iter().map(|v| v * v).sum())
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(x.iter().map(|v| 2.0 * v).collect())
    }
}

/// Mixed input with weight `mu` on the training partner.
pub fn mixed_input(x_t: &[f64], x_i: &[f64], mu: f64) -> Result<Vec<f64>> {
    mix_pair(x_t, x_i, 1.0 - mu)
}

/// `μ·(x_i − x_t)ᵀ ∇_x L_t(x_t)`.
pub fn first_order_term(field: &dyn ScalarField, x_t: &[f64], x_i: &[f64], mu: f64) -> Result<f64> {
    if x_t.len() != x_i.len() {
        return Err(Error::input("x_t and x_i differ in length"));
    }
    let g = field.gradient(x_t)?;
    let dir: f64 = x_i
        .iter()
        .zip(x_t)
        .zip(&g)
        .map(|((a, b), g)| (a - b) * g)
        .sum();
    let v = mu * dir;
    if !v.is_finite() {
        return Err(Error::numerical("first-order term", "non-finite value"));
    }
    Ok(v)
}

/// Network form of [`first_order_term`] for the auxiliary loss with label `y_t`.
pub fn first_order_term_net(
    state: &SplitNetworkState,
    x_t: &[f64],
    y_t: usize,
    x_i: &[f64],
    mu: f64,
) -> Result<f64> {
    first_order_term(&AuxLossField { state, label: y_t }, x_t, x_i, mu)
}

/// `(L_mt(h) − L_t) / h · μ`, the secant estimate of the first-order term.
pub fn secant_first_order(
    field: &dyn ScalarField,
    x_t: &[f64],
    x_i: &[f64],
    mu: f64,
    h: f64,
) -> Result<f64> {
    let l_t = field.value(x_t)?;
    let l_h = field.value(&mixed_input(x_t, x_i, h)?)?;
    Ok((l_h - l_t) / h * mu)
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct TaylorReport {
    /// Weight on the training partner.
    pub mu_values: Vec<f64>,
    /// The same points as weight on the test sample (`1 − μ`).
    pub ratio_on_test: Vec<f64>,
    pub l_t: f64,
    pub l_mt: Vec<f64>,
    /// `L_t + μ·(x_i − x_t)ᵀ∇_x L_t(x_t)`
    pub first_order: Vec<f64>,
    pub remainder: Vec<f64>,
    /// Slope of `log remainder` against `log μ` over the retained points.
    pub fitted_exponent: f64,
    /// `remainder(μ/2) / remainder(μ)` for consecutive points.
    pub successive_ratios: Vec<f64>,
    /// μ values excluded from the fit because the remainder underflowed.
    pub dropped: Vec<f64>,
}

impl TaylorReport {
    pub fn exponent_within(&self, lo: f64, hi: f64) -> bool {
        (lo..=hi).contains(&self.fitted_exponent)
    }

    /// Ratios are `r(μ/2)/r(μ)`, so an `O(μ²)` remainder gives about `1/4`.
    /// This returns their reciprocals, which approach 4.
    pub fn halving_factors(&self) -> Vec<f64> {
        self.successive_ratios.iter().map(|r| 1.0 / r).collect()
    }

    pub fn to_csv(&self, config_hash: &str) -> String {
        let mut s = format!(
            "# config_hash={config_hash}\nmu,ratio_on_test,l_t,l_mt,first_order,remainder\n"
        );
        for i in 0..self.mu_values.len() {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.mu_values[i],
                self.ratio_on_test[i],
                self.l_t,
                self.l_mt[i],
                self.first_order[i],
                self.remainder[i]
            ));
        }
        s
    }
}

/// Least-squares slope of `y` on `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn check_mu_list(mu_list: &[f64]) -> Result<()> {
    if mu_list.len() < 2 {
        return Err(Error::input("need at least two expansion points"));
    }
    if mu_list.iter().any(|&m| !(m > 0.0 && m <= 0.1)) {
        return Err(Error::input("expansion points must lie in (0, 0.1]"));
    }
    for w in mu_list.windows(2) {
        if ((w[1] - w[0] / 2.0) / w[0]).abs() > 1e-12 {
            return Err(Error::input(format!(
                "expansion points must halve: {} then {}",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

pub fn taylor_verify(
    field: &dyn ScalarField,
    x_t: &[f64],
    x_i: &[f64],
    mu_list: &[f64],
) -> Result<TaylorReport> {
    check_mu_list(mu_list)?;
    let l_t = field.value(x_t)?;
    let slope = first_order_term(field, x_t, x_i, 1.0)?;
    let mut l_mt = Vec::new();
    let mut first_order = Vec::new();
    let mut remainder = Vec::new();
    for &mu in mu_list {
        let l = field.value(&mixed_input(x_t, x_i, mu)?)?;
        let fo = l_t + mu * slope;
        l_mt.push(l);
        first_order.push(fo);
        remainder.push((l - fo).abs());
    }
    if l_mt.iter().chain(&remainder).any(|v| !v.is_finite()) {
        return Err(Error::numerical("Taylor verification", "non-finite loss"));
    }
    let (mut lx, mut ly, mut dropped) = (Vec::new(), Vec::new(), Vec::new());
    for (&mu, &r) in mu_list.iter().zip(&remainder) {
        if r < REMAINDER_FLOOR {
            dropped.push(mu);
        } else {
            lx.push(mu.ln());
            ly.push(r.ln());
        }
    }
    if !dropped.is_empty() {
        log::warn!("remainder underflow at mu = {dropped:?}; excluded from fit");
    }
    let fitted_exponent = if lx.len() >= 2 {
        fit_slope(&lx, &ly)
    } else {
        f64::NAN
    };
    let successive_ratios = remainder.windows(2).map(|w| w[1] / w[0]).collect();
    Ok(TaylorReport {
        ratio_on_test: mu_list.iter().map(|m| 1.0 - m).collect(),
        mu_values: mu_list.to_vec(),
        l_t,
        l_mt,
        first_order,
        remainder,
        fitted_exponent,
        successive_ratios,
        dropped,
    })
}

/// [`taylor_verify`] for the auxiliary loss of a network.
pub fn taylor_verify_net(
    state: &SplitNetworkState,
    x_t: &[f64],
    y_t: usize,
    x_i: &[f64],
    mu_list: &[f64],
) -> Result<TaylorReport> {
    if !state.spec().activation.is_smooth() {
        return Err(Error::config(
            "Taylor verification needs a smooth activation",
        ));
    }
    taylor_verify(&AuxLossField { state, label: y_t }, x_t, x_i, mu_list)
}

/// The four expansion points used throughout: 0.05 halved three times.
pub const DEFAULT_MU_LIST: [f64; 4] = [0.05, 0.025, 0.0125, 0.00625];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_remainder_is_exact() {
        let x_t = [0.3, -1.0, 2.0];
        let x_i = [1.0, 0.5, -0.5];
        let r = taylor_verify(&Quadratic, &x_t, &x_i, &DEFAULT_MU_LIST).unwrap();
        let d2: f64 = x_t.iter().zip(&x_i).map(|(a, b)| (a - b) * (a - b)).sum();
        for (mu, rem) in r.mu_values.iter().zip(&r.remainder) {
            assert!((rem - mu * mu * d2).abs() < 1e-12 * d2.max(1.0));
        }
        assert!((r.fitted_exponent - 2.0).abs() < 1e-6);
        for f in r.halving_factors() {
            assert!((f - 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn first_order_vanishes_on_zero_direction_or_mu() {
        let x = [0.4, 0.1];
        assert_eq!(first_order_term(&Quadratic, &x, &x, 0.3).unwrap(), 0.0);
        assert_eq!(
            first_order_term(&Quadratic, &x, &[1.0, 2.0], 0.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn mu_list_must_halve_inside_range() {
        let x = [0.0];
        assert!(taylor_verify(&Quadratic, &x, &[1.0], &[0.05, 0.02]).is_err());
        assert!(taylor_verify(&Quadratic, &x, &[1.0], &[0.2, 0.1]).is_err());
        assert!(taylor_verify(&Quadratic, &x, &[1.0], &[0.05]).is_err());
    }

    #[test]
    fn zero_direction_drops_every_point() {
        let x = [0.5, 0.5];
        let r = taylor_verify(&Quadratic, &x, &x, &DEFAULT_MU_LIST).unwrap();
        assert_eq!(r.dropped.len(), 4);
        assert!(r.fitted_exponent.is_nan());
    }

    #[test]
    fn slope_fit_recovers_power_law() {
        let x: Vec<f64> = [1.0f64, 2.0, 4.0, 8.0].iter().map(|v| v.ln()).collect();
        let y: Vec<f64> = [1.0f64, 8.0, 64.0, 512.0].iter().map(|v| v.ln()).collect();
        assert!((fit_slope(&x, &y) - 3.0).abs() < 1e-12);
    }
}
