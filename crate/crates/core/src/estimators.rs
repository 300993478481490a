//! Off-policy value targets and advantages.
//!
//! Importance ratios between a target and a behavioral policy are computed
//! in log space and clipped after exponentiation: rho is clipped at
//! `rho_bar` and drives the temporal-difference correction, c is clipped
//! at lambda and discounts the recursive tail. With identical policies the
//! targets reduce to TD(lambda) and the advantages to GAE(lambda).

use thiserror::Error;

use crate::mdp::TransitionBatch;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("slice lengths disagree: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite input at step {0}")]
    NonFinite(usize),
    #[error("batch is empty")]
    Empty,
}

/// One trajectory segment: rewards, terminal flags, and the sampling
/// policy's log-probabilities, all of length T.
#[derive(Debug, Clone, Copy)]
pub struct Segment<'a> {
    pub rewards: &'a [f64],
    pub terminals: &'a [bool],
    pub behavior_logprobs: &'a [f64],
}

impl<'a> Segment<'a> {
    /// The contiguous segment owned by environment `env`.
    pub fn from_batch(batch: &'a TransitionBatch, env: usize) -> Self {
        let range = batch.env_range(env);
        Self {
            rewards: &batch.rewards()[range.clone()],
            terminals: &batch.terminals()[range.clone()],
            behavior_logprobs: &batch.behavior_logprobs()[range],
        }
    }

    /// The whole batch as one segment (valid when `num_envs == 1`).
    pub fn from_whole_batch(batch: &'a TransitionBatch) -> Self {
        assert_eq!(batch.num_envs(), 1, "whole-batch segment needs a single environment");
        Self {
            rewards: batch.rewards(),
            terminals: batch.terminals(),
            behavior_logprobs: batch.behavior_logprobs(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Clipped importance-sampling weights per step.
#[derive(Debug, Clone)]
pub struct IsWeights {
    /// min(rho_bar, ratio) per step.
    pub rho: Vec<f64>,
    /// min(lambda, ratio) per step.
    pub c: Vec<f64>,
}

impl IsWeights {
    pub fn from_logprobs(
        target_logprobs: &[f64],
        behavior_logprobs: &[f64],
        rho_bar: f64,
        lambda: f64,
    ) -> Result<Self, EstimatorError> {
        if target_logprobs.len() != behavior_logprobs.len() {
            return Err(EstimatorError::LengthMismatch {
                expected: behavior_logprobs.len(),
                got: target_logprobs.len(),
            });
        }
        let mut rho = Vec::with_capacity(target_logprobs.len());
        let mut c = Vec::with_capacity(target_logprobs.len());
        for (t, (&tl, &bl)) in target_logprobs.iter().zip(behavior_logprobs).enumerate() {
            if !tl.is_finite() || !bl.is_finite() {
                return Err(EstimatorError::NonFinite(t));
            }
            let ratio = (tl - bl).exp();
            rho.push(ratio.min(rho_bar));
            c.push(ratio.min(lambda));
        }
        Ok(Self { rho, c })
    }
}

fn check_inputs(
    seg: &Segment<'_>,
    target_logprobs: &[f64],
    values: &[f64],
) -> Result<(), EstimatorError> {
    let t = seg.len();
    if t == 0 {
        return Err(EstimatorError::Empty);
    }
    if seg.terminals.len() != t || seg.behavior_logprobs.len() != t {
        return Err(EstimatorError::LengthMismatch { expected: t, got: seg.terminals.len() });
    }
    if target_logprobs.len() != t {
        return Err(EstimatorError::LengthMismatch { expected: t, got: target_logprobs.len() });
    }
    if values.len() != t + 1 {
        return Err(EstimatorError::LengthMismatch { expected: t + 1, got: values.len() });
    }
    for (i, &r) in seg.rewards.iter().enumerate() {
        if !r.is_finite() {
            return Err(EstimatorError::NonFinite(i));
        }
    }
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(EstimatorError::NonFinite(i));
        }
    }
    Ok(())
}

/// Clipped importance-sampled value targets, computed backward:
///
/// ```text
/// delta_t = r_t + gamma * v(s_{t+1}) - v(s_t)
/// y_t     = v(s_t) + rho_t * delta_t + gamma * c_t * (y_{t+1} - v(s_{t+1}))
/// y_{T+1} = v(s_{T+1})
/// ```
///
/// `values` holds v(s_t) for the T segment steps plus the bootstrap value
/// of the final next state. Both the bootstrap and the recursive tail are
/// masked at terminal steps.
pub fn vtrace_targets(
    seg: &Segment<'_>,
    target_logprobs: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
    rho_bar: f64,
) -> Result<Vec<f64>, EstimatorError> {
    check_inputs(seg, target_logprobs, values)?;
    let w = IsWeights::from_logprobs(target_logprobs, seg.behavior_logprobs, rho_bar, lambda)?;
    let t_len = seg.len();
    let mut targets = vec![0.0; t_len];
    let mut next_y = values[t_len];
    for t in (0..t_len).rev() {
        let mask = if seg.terminals[t] { 0.0 } else { 1.0 };
        let delta = seg.rewards[t] + gamma * values[t + 1] * mask - values[t];
        let y = values[t] + w.rho[t] * delta + gamma * w.c[t] * mask * (next_y - values[t + 1]);
        targets[t] = y;
        next_y = y;
    }
    Ok(targets)
}

/// Advantage recursion with the same clipped c weights:
///
/// ```text
/// A_t = delta_t + gamma * c_t * A_{t+1},   A_{T+1} = 0
/// ```
///
/// Terminal steps zero both the bootstrap inside delta and the tail.
/// Returned advantages are unscaled; see [`scale_advantages`].
pub fn retrace_gae(
    seg: &Segment<'_>,
    target_logprobs: &[f64],
    values: &[f64],
    gamma: f64,
    lambda: f64,
    rho_bar: f64,
) -> Result<Vec<f64>, EstimatorError> {
    check_inputs(seg, target_logprobs, values)?;
    let w = IsWeights::from_logprobs(target_logprobs, seg.behavior_logprobs, rho_bar, lambda)?;
    let t_len = seg.len();
    let mut adv = vec![0.0; t_len];
    let mut tail = 0.0;
    for t in (0..t_len).rev() {
        let mask = if seg.terminals[t] { 0.0 } else { 1.0 };
        let delta = seg.rewards[t] + gamma * values[t + 1] * mask - values[t];
        tail = delta + gamma * w.c[t] * mask * tail;
        adv[t] = tail;
    }
    Ok(adv)
}

/// Divides by the population standard deviation of the batch without
/// centering, so no element changes sign. A constant batch (standard
/// deviation zero) passes through unchanged.
pub fn scale_advantages(advantages: &[f64]) -> Result<Vec<f64>, EstimatorError> {
    if advantages.is_empty() {
        return Err(EstimatorError::Empty);
    }
    let first = advantages[0];
    if advantages.iter().all(|&a| a == first) {
        return Ok(advantages.to_vec());
    }
    let n = advantages.len() as f64;
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(advantages.iter().map(|&a| a / std).collect())
}
