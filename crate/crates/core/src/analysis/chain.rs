//! The input gradient of the auxiliary loss factored through the feature cut.

use crate::aux_tasks::AuxCrossEntropy;
use crate::error::{Error, Result};
use crate::network::{Mode, SplitNetworkState};
use crate::tensor::{l2_norm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Jacobian {
    /// Central differences with step `h`.
    FiniteDifference { h: f64 },
    /// Rows `Jᵀe_k` from one vector-Jacobian product per feature.
    Analytic,
}

/// Encoder input-Jacobian `[feature_dim, input_len]` at a single sample.
pub fn encoder_jacobian(
    state: &SplitNetworkState,
    x: &[f64],
    method: Jacobian,
) -> Result<Vec<Vec<f64>>> {
    let (c, h, w) = state.spec().input_shape;
    let fd = state.feature_dim();
    let n = x.len();
    if n != c * h * w {
        return Err(Error::input(
            "sample length does not match the network input",
        ));
    }
    let mut jac = vec![vec![0.0; n]; fd];
    match method {
        Jacobian::FiniteDifference { h: step } => {
            let feat = |v: Vec<f64>| -> Result<Vec<f64>> {
                let t = Tensor::new(vec![1, c, h, w], v)?;
                Ok(state.forward_features(&t, Mode::Eval)?.features.into_data())
            };
            for j in 0..n {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[j] += step;
                xm[j] -= step;
                let (fp, fm) = (feat(xp)?, feat(xm)?);
                for k in 0..fd {
                    jac[k][j] = (fp[k] - fm[k]) / (2.0 * step);
                }
            }
        }
        Jacobian::Analytic => {
            let t = Tensor::new(vec![1, c, h, w], x.to_vec())?;
            for (k, row) in jac.iter_mut().enumerate() {
                let mut e = vec![0.0; fd];
                e[k] = 1.0;
                let g = state.encoder_vjp(&t, Mode::Eval, &Tensor::new(vec![1, fd], e)?)?;
                row.copy_from_slice(g.data());
            }
        }
    }
    Ok(jac)
}

/// `‖∇_x L_t − Jᵀ·∂L_t/∂feat‖ / ‖∇_x L_t‖` for the auxiliary loss with label `y_t`.
pub fn chain_rule_check(
    state: &SplitNetworkState,
    x_t: &[f64],
    y_t: usize,
    method: Jacobian,
) -> Result<f64> {
    let (c, h, w) = state.spec().input_shape;
    let t = Tensor::new(vec![1, c, h, w], x_t.to_vec())?;
    let labels = [y_t];
    let g = state.gradients(&AuxCrossEntropy { labels: &labels }, &t, Mode::Eval)?;
    let jac = encoder_jacobian(state, x_t, method)?;
    let d_feat = g.features.data();
    let mut composed = vec![0.0; x_t.len()];
    for (row, &dk) in jac.iter().zip(d_feat) {
        for (a, r) in composed.iter_mut().zip(row) {
            *a += r * dk;
        }
    }
    let direct = g.input.data();
    let denom = l2_norm(direct);
    if !denom.is_finite() || denom == 0.0 {
        return Err(Error::numerical(
            "chain-rule check",
            "input gradient is zero or non-finite",
        ));
    }
    let diff: Vec<f64> = direct.iter().zip(&composed).map(|(a, b)| a - b).collect();
    Ok(l2_norm(&diff) / denom)
}
