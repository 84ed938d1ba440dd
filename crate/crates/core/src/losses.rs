//! Click loss, order loss, scalarization, the non-uniformity regularizer and
//! the total training objective.
//!
//! All values are in nats. The click loss is a sampled softmax over the
//! positive plus a negative candidate set; the order loss is binary
//! cross-entropy on the target item's logit.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sampling::PreferenceVector;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("weighted loss sum is {0}, cannot normalize contributions")]
    DegenerateWeighting(f64),
}

/// Map applied to the normalized contribution vector before the KL term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GFunction {
    Identity,
    /// Smaller gradients than the identity; the default.
    #[default]
    Softmax,
}

impl std::str::FromStr for GFunction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(GFunction::Identity),
            "softmax" => Ok(GFunction::Softmax),
            other => Err(format!("unknown g function '{other}'")),
        }
    }
}

/// Per-objective losses and their weighted and normalized contributions for
/// one scalarized total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_o: f64,
    pub weighted_c: f64,
    pub weighted_o: f64,
    /// Normalized contributions `[pi_hat_c, pi_hat_o]`; `[1/2, 1/2]` when the
    /// weighted sum is zero.
    pub pi_hat: [f64; 2],
    pub reg: f64,
    pub total: f64,
}

/// Sampled softmax click loss: `-log( exp(p) / (exp(p) + sum_j exp(n_j)) )`,
/// computed with a max shift so logits up to +-700 stay finite.
pub fn click_loss_sampled_softmax(positive_logit: f64, negative_logits: &[f64]) -> f64 {
    assert!(
        !negative_logits.is_empty(),
        "sampled softmax needs at least one negative"
    );
    let mut max = positive_logit;
    for &n in negative_logits {
        if n > max {
            max = n;
        }
    }
    let mut sum = (positive_logit - max).exp();
    for &n in negative_logits {
        sum += (n - max).exp();
    }
    // lse - positive, with lse = max + ln(sum).
    max + sum.ln() - positive_logit
}

/// Binary cross-entropy on a single logit, stable branch:
/// `max(x, 0) - x*y + log(1 + exp(-|x|))`.
pub fn order_loss_bce(logit: f64, label: bool) -> f64 {
    let y = if label { 1.0 } else { 0.0 };
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

/// Fixed-preference scalarization: `pi_c * l_c + pi_o * l_o`.
pub fn scalarized_loss(l_c: f64, l_o: f64, pi: &PreferenceVector) -> f64 {
    pi.pi_c() * l_c + pi.pi_o() * l_o
}

/// KL divergence of a two-point distribution `[q, 1-q]` from `[1/2, 1/2]`:
/// `q ln(2q) + (1-q) ln(2(1-q))`, with the `0 ln 0 = 0` convention.
fn kl_from_uniform(q: f64) -> f64 {
    let term = |p: f64| if p > 0.0 { p * (2.0 * p).ln() } else { 0.0 };
    term(q) + term(1.0 - q)
}

fn pi_hat(l_c: f64, l_o: f64, pi: &PreferenceVector) -> Result<[f64; 2], LossError> {
    let wc = pi.pi_c() * l_c;
    let wo = pi.pi_o() * l_o;
    let sum = wc + wo;
    if sum <= 0.0 || !sum.is_finite() {
        return Err(LossError::DegenerateWeighting(sum));
    }
    Ok([wc / sum, wo / sum])
}

/// Non-uniformity penalty: `KL(g(pi_hat) || [1/2, 1/2])` where
/// `pi_hat_k = pi_k l_k / (pi_c l_c + pi_o l_o)`.
pub fn non_uniformity_penalty(
    l_c: f64,
    l_o: f64,
    pi: &PreferenceVector,
    g: GFunction,
) -> Result<f64, LossError> {
    Ok(non_uniformity_with_grad(l_c, l_o, pi, g)?.0)
}

/// Penalty value plus its partial derivatives with respect to `l_c` and
/// `l_o`, shared with the training tape so both paths use one formula.
pub fn non_uniformity_with_grad(
    l_c: f64,
    l_o: f64,
    pi: &PreferenceVector,
    g: GFunction,
) -> Result<(f64, f64, f64), LossError> {
    let wc = pi.pi_c() * l_c;
    let wo = pi.pi_o() * l_o;
    let sum = wc + wo;
    let [hc, _ho] = pi_hat(l_c, l_o, pi)?;
    // d pi_hat_c / d l_c = pi_c * wo / sum^2; d pi_hat_c / d l_o = -pi_o * wc / sum^2.
    let dhc_dlc = pi.pi_c() * wo / (sum * sum);
    let dhc_dlo = -pi.pi_o() * wc / (sum * sum);
    match g {
        GFunction::Identity => {
            // The identity requires pi_hat itself to be the probability
            // vector; a zero component makes ln(pi_hat_c / pi_hat_o) blow up.
            if pi.pi_c() == 0.0 || pi.pi_o() == 0.0 {
                return Err(LossError::DegenerateWeighting(sum));
            }
            let value = kl_from_uniform(hc);
            // dKL/d pi_hat_c = ln(pi_hat_c / (1 - pi_hat_c)).
            let dkl_dhc = (hc / (1.0 - hc)).ln();
            Ok((value, dkl_dhc * dhc_dlc, dkl_dhc * dhc_dlo))
        }
        GFunction::Softmax => {
            // Two-class softmax of [hc, ho] depends only on hc - ho = 2hc - 1.
            let qc = 1.0 / (1.0 + (-(2.0 * hc - 1.0)).exp());
            let value = kl_from_uniform(qc);
            // dKL/dqc = ln(qc / (1-qc)); dqc/dhc = 2 qc (1 - qc).
            let dkl_dhc = (qc / (1.0 - qc)).ln() * 2.0 * qc * (1.0 - qc);
            Ok((value, dkl_dhc * dhc_dlc, dkl_dhc * dhc_dlo))
        }
    }
}

/// The full training objective for one preference draw:
/// scalarized loss plus `lambda` times the non-uniformity penalty.
/// With `lambda = 0` the penalty is skipped entirely.
pub fn total_loss(
    batch_l_c: f64,
    batch_l_o: f64,
    pi: &PreferenceVector,
    lambda: f64,
    g: GFunction,
) -> Result<LossBreakdown, LossError> {
    assert!(lambda >= 0.0, "lambda must be non-negative");
    let weighted_c = pi.pi_c() * batch_l_c;
    let weighted_o = pi.pi_o() * batch_l_o;
    let reg = if lambda > 0.0 {
        non_uniformity_penalty(batch_l_c, batch_l_o, pi, g)?
    } else {
        0.0
    };
    let pi_hat = pi_hat(batch_l_c, batch_l_o, pi).unwrap_or([0.5, 0.5]);
    Ok(LossBreakdown {
        l_c: batch_l_c,
        l_o: batch_l_o,
        weighted_c,
        weighted_o,
        pi_hat,
        reg,
        total: weighted_c + weighted_o + lambda * reg,
    })
}
