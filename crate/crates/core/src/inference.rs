//! The E-step: scaled forward/backward recursions over experience sequences
//! with odometric relation densities, producing γ, ξ and the sequence
//! log-likelihood.
//!
//! With density factors in the recursion the unscaled products vanish within
//! tens of steps, so each forward row is normalized and the scale factors
//! stored; the log-likelihood is the sum of log scales. The backward table
//! uses the matching convention (β[t] divided by the product of scales after
//! t), under which Σᵢ α[t][i]·β[t][i] = 1 for every t.

use ndarray::{Array2, Array3};

use crate::error::{OdoHmmError, Result};
use crate::model::{AugmentedHmm, ExperienceSequence};

/// Scaled forward/backward tables plus the posteriors derived from them.
#[derive(Debug, Clone)]
pub struct EStepTables {
    pub alpha: Array2<f64>,
    pub beta: Array2<f64>,
    pub scales: Vec<f64>,
    pub gamma: Array2<f64>,
    pub xi: Array3<f64>,
    pub log_likelihood: f64,
}

/// Per-step emission probabilities and transition-weight matrices.
///
/// `step_weight[t-1][(i,j)] = A_ij · f(r_t | R_ij) · b_t(j)` for t ≥ 1; the
/// relation density factor is dropped when odometry is ignored.
struct Precomputed {
    b0: Vec<f64>,
    step_weight: Vec<Array2<f64>>,
}

fn precompute(model: &AugmentedHmm, e: &ExperienceSequence, use_odometry: bool) -> Result<Precomputed> {
    e.validate_against(&model.obs_dims)?;
    if use_odometry && e.coordinate_regime != model.coordinate_regime {
        return Err(OdoHmmError::Structural(
            "sequence coordinate regime does not match model".into(),
        ));
    }
    let n = model.n_states;
    let t_len = e.len();
    let b0: Vec<f64> = (0..n)
        .map(|i| model.observation_probability(i, &e.obs[0]))
        .collect::<Result<_>>()?;
    let mut step_weight = Vec::with_capacity(t_len - 1);
    for t in 1..t_len {
        let mut w = Array2::zeros((n, n));
        for j in 0..n {
            let b = model.observation_probability(j, &e.obs[t])?;
            for i in 0..n {
                let f = if use_odometry {
                    model.relation[i][j].log_density(&e.odo[t]).exp()
                } else {
                    1.0
                };
                w[(i, j)] = model.transition[(i, j)] * f * b;
            }
        }
        step_weight.push(w);
    }
    Ok(Precomputed { b0, step_weight })
}

fn forward_from(pre: &Precomputed, model: &AugmentedHmm, t_len: usize) -> Result<(Array2<f64>, Vec<f64>)> {
    let n = model.n_states;
    let mut alpha = Array2::zeros((t_len, n));
    let mut scales = Vec::with_capacity(t_len);

    alpha[(0, model.initial_state)] = pre.b0[model.initial_state];
    let c0: f64 = alpha.row(0).sum();
    if c0 <= 0.0 {
        return Err(OdoHmmError::ImpossibleSequence { t: 0 });
    }
    alpha.row_mut(0).mapv_inplace(|v| v / c0);
    scales.push(c0);

    for t in 1..t_len {
        let w = &pre.step_weight[t - 1];
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += alpha[(t - 1, i)] * w[(i, j)];
            }
            alpha[(t, j)] = acc;
        }
        let c: f64 = alpha.row(t).sum();
        if c <= 0.0 || !c.is_finite() {
            return Err(OdoHmmError::ImpossibleSequence { t });
        }
        alpha.row_mut(t).mapv_inplace(|v| v / c);
        scales.push(c);
    }
    Ok((alpha, scales))
}

fn backward_from(pre: &Precomputed, model: &AugmentedHmm, scales: &[f64], t_len: usize) -> Array2<f64> {
    let n = model.n_states;
    let mut beta = Array2::zeros((t_len, n));
    beta.row_mut(t_len - 1).fill(1.0);
    for t in (0..t_len - 1).rev() {
        let w = &pre.step_weight[t];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += w[(i, j)] * beta[(t + 1, j)];
            }
            beta[(t, i)] = acc / scales[t + 1];
        }
    }
    beta
}

/// Scaled forward pass. `alpha[t]` sums to 1; the log-likelihood of the
/// sequence is the sum of log scale factors.
pub fn forward(
    model: &AugmentedHmm,
    e: &ExperienceSequence,
    use_odometry: bool,
) -> Result<(Array2<f64>, Vec<f64>)> {
    let pre = precompute(model, e, use_odometry)?;
    forward_from(&pre, model, e.len())
}

/// Scaled backward pass using the scale factors from the matching forward
/// pass.
pub fn backward(
    model: &AugmentedHmm,
    e: &ExperienceSequence,
    scales: &[f64],
    use_odometry: bool,
) -> Result<Array2<f64>> {
    let pre = precompute(model, e, use_odometry)?;
    Ok(backward_from(&pre, model, scales, e.len()))
}

/// Log-likelihood of the sequence under the model, without materializing
/// the posteriors.
pub fn log_likelihood(model: &AugmentedHmm, e: &ExperienceSequence, use_odometry: bool) -> Result<f64> {
    let (_, scales) = forward(model, e, use_odometry)?;
    Ok(scales.iter().map(|c| c.ln()).sum())
}

/// Full E-step: forward, backward, state-occupation probabilities γ and
/// state-transition probabilities ξ.
pub fn e_step(model: &AugmentedHmm, e: &ExperienceSequence, use_odometry: bool) -> Result<EStepTables> {
    let pre = precompute(model, e, use_odometry)?;
    let t_len = e.len();
    let n = model.n_states;
    let (alpha, scales) = forward_from(&pre, model, t_len)?;
    let beta = backward_from(&pre, model, &scales, t_len);

    let mut gamma = Array2::zeros((t_len, n));
    for t in 0..t_len {
        let mut row_sum = 0.0;
        for i in 0..n {
            let v = alpha[(t, i)] * beta[(t, i)];
            gamma[(t, i)] = v;
            row_sum += v;
        }
        gamma.row_mut(t).mapv_inplace(|v| v / row_sum);
    }

    let mut xi = Array3::zeros((t_len - 1, n, n));
    for t in 0..t_len - 1 {
        let w = &pre.step_weight[t];
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = alpha[(t, i)] * w[(i, j)] * beta[(t + 1, j)];
                xi[(t, i, j)] = v;
                total += v;
            }
        }
        for i in 0..n {
            for j in 0..n {
                xi[(t, i, j)] /= total;
            }
        }
    }

    let log_likelihood = scales.iter().map(|c| c.ln()).sum();
    Ok(EStepTables { alpha, beta, scales, gamma, xi, log_likelihood })
}
