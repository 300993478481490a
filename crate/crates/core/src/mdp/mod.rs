//! Finite MDPs, tabular policies, and rollout batches.
//!
//! Everything downstream (the exact oracle, the estimators, the training
//! loop) operates on the dense representations defined here: a transition
//! tensor indexed `(s, a, s')`, a reward matrix indexed `(s, a)` with
//! rewards in `[0, 1]`, and per-state action distributions.

mod four_rooms;
mod random;
mod rollout;

pub use four_rooms::{build_four_rooms, FourRoomsLayout, FOUR_ROOMS_GRID};
pub use random::{build_random_mdp, random_policy};
pub use rollout::{rollout, BehaviorSampler, EnvPool};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for "this row is a probability distribution" checks.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("need at least one state and one action (got {states} states, {actions} actions)")]
    EmptySpace { states: usize, actions: usize },
    #[error("transition row ({state}, {action}) sums to {sum}, expected 1 within {ROW_SUM_TOL}")]
    RowSum { state: usize, action: usize, sum: f64 },
    #[error("transition probability at ({state}, {action}) is negative")]
    NegativeProbability { state: usize, action: usize },
    #[error("reward at ({state}, {action}) is {value}, outside [0, 1]")]
    RewardRange { state: usize, action: usize, value: f64 },
    #[error("gamma must lie in [0, 1), got {0}")]
    GammaRange(f64),
    #[error("state index {0} out of range")]
    StateRange(usize),
    #[error("slip probability must lie in [0, 1], got {0}")]
    SlipRange(f64),
    #[error("terminal state {0} must self-loop with probability 1 and reward 0")]
    TerminalSelfLoop(usize),
    #[error("policy row {state} sums to {sum}, expected 1 within {ROW_SUM_TOL}")]
    PolicyRowSum { state: usize, sum: f64 },
    #[error("policy entry ({state}, {action}) is negative")]
    PolicyNegative { state: usize, action: usize },
    #[error("policy shape ({rows}, {cols}) does not match MDP ({states}, {actions})")]
    PolicyShape { rows: usize, cols: usize, states: usize, actions: usize },
    #[error("batch field lengths disagree")]
    BatchLength,
    #[error("malformed MDP document: {0}")]
    Document(String),
}

/// A finite MDP with dense dynamics.
///
/// Invariants enforced at construction:
/// - every transition row sums to 1 within [`ROW_SUM_TOL`],
/// - all rewards lie in `[0, 1]`,
/// - `0 <= gamma < 1`,
/// - terminal states self-loop with probability 1 and reward 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    transition: Array3<f64>,
    reward: Array2<f64>,
    gamma: f64,
    initial_state: usize,
    terminal: Vec<bool>,
}

impl TabularMdp {
    pub fn new(
        transition: Array3<f64>,
        reward: Array2<f64>,
        gamma: f64,
        initial_state: usize,
        terminal_states: &[usize],
    ) -> Result<Self, MdpError> {
        let (num_states, num_actions, next_dim) = transition.dim();
        if num_states == 0 || num_actions == 0 {
            return Err(MdpError::EmptySpace { states: num_states, actions: num_actions });
        }
        if next_dim != num_states || reward.dim() != (num_states, num_actions) {
            return Err(MdpError::Document(format!(
                "transition shape {:?} and reward shape {:?} disagree",
                transition.dim(),
                reward.dim()
            )));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(MdpError::GammaRange(gamma));
        }
        if initial_state >= num_states {
            return Err(MdpError::StateRange(initial_state));
        }
        let mut terminal = vec![false; num_states];
        for &s in terminal_states {
            if s >= num_states {
                return Err(MdpError::StateRange(s));
            }
            terminal[s] = true;
        }

        for s in 0..num_states {
            for a in 0..num_actions {
                let mut sum = 0.0;
                for s2 in 0..num_states {
                    let p = transition[[s, a, s2]];
                    if p < 0.0 {
                        return Err(MdpError::NegativeProbability { state: s, action: a });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(MdpError::RowSum { state: s, action: a, sum });
                }
                let r = reward[[s, a]];
                if !(0.0..=1.0).contains(&r) {
                    return Err(MdpError::RewardRange { state: s, action: a, value: r });
                }
                if terminal[s] && (transition[[s, a, s]] != 1.0 || r != 0.0) {
                    return Err(MdpError::TerminalSelfLoop(s));
                }
            }
        }

        Ok(Self { num_states, num_actions, transition, reward, gamma, initial_state, terminal })
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Transition tensor indexed `(s, a, s')`.
    pub fn transition(&self) -> &Array3<f64> {
        &self.transition
    }

    /// Reward matrix indexed `(s, a)`.
    pub fn reward(&self) -> &Array2<f64> {
        &self.reward
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn initial_state(&self) -> usize {
        self.initial_state
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        self.terminal[state]
    }

    pub fn terminal_states(&self) -> Vec<usize> {
        (0..self.num_states).filter(|&s| self.terminal[s]).collect()
    }

    /// Serializes to a JSON document with explicit shapes and flat row-major
    /// arrays, suitable as a fixture.
    pub fn to_json_string(&self) -> String {
        let doc = MdpDocument {
            num_states: self.num_states,
            num_actions: self.num_actions,
            gamma: self.gamma,
            initial_state: self.initial_state,
            terminal_states: self.terminal_states(),
            transition: self.transition.iter().copied().collect(),
            reward: self.reward.iter().copied().collect(),
        };
        serde_json::to_string_pretty(&doc).expect("MDP document serialization cannot fail")
    }

    pub fn from_json_str(text: &str) -> Result<Self, MdpError> {
        let doc: MdpDocument =
            serde_json::from_str(text).map_err(|e| MdpError::Document(e.to_string()))?;
        let (s, a) = (doc.num_states, doc.num_actions);
        let transition = Array3::from_shape_vec((s, a, s), doc.transition)
            .map_err(|e| MdpError::Document(e.to_string()))?;
        let reward = Array2::from_shape_vec((s, a), doc.reward)
            .map_err(|e| MdpError::Document(e.to_string()))?;
        Self::new(transition, reward, doc.gamma, doc.initial_state, &doc.terminal_states)
    }
}

#[derive(Serialize, Deserialize)]
struct MdpDocument {
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    initial_state: usize,
    terminal_states: Vec<usize>,
    /// Row-major `(s, a, s')`.
    transition: Vec<f64>,
    /// Row-major `(s, a)`.
    reward: Vec<f64>,
}

/// A per-state action distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    probs: Array2<f64>,
}

impl TabularPolicy {
    pub fn new(probs: Array2<f64>) -> Result<Self, MdpError> {
        for (s, row) in probs.rows().into_iter().enumerate() {
            let mut sum = 0.0;
            for (a, &p) in row.iter().enumerate() {
                if p < 0.0 {
                    return Err(MdpError::PolicyNegative { state: s, action: a });
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(MdpError::PolicyRowSum { state: s, sum });
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        let p = 1.0 / num_actions as f64;
        Self { probs: Array2::from_elem((num_states, num_actions), p) }
    }

    pub fn num_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn num_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[[state, action]]
    }

    /// Action distribution at one state.
    pub fn row(&self, state: usize) -> ndarray::ArrayView1<'_, f64> {
        self.probs.row(state)
    }

    pub fn check_compatible(&self, mdp: &TabularMdp) -> Result<(), MdpError> {
        if self.num_states() != mdp.num_states() || self.num_actions() != mdp.num_actions() {
            return Err(MdpError::PolicyShape {
                rows: self.num_states(),
                cols: self.num_actions(),
                states: mdp.num_states(),
                actions: mdp.num_actions(),
            });
        }
        Ok(())
    }
}

/// A flat batch of transitions from `num_envs` environments, each
/// contributing a contiguous segment of `horizon` steps.
///
/// Episodes auto-reset: at a step that enters a terminal state,
/// `terminals[t]` is true and `next_states[t]` is the reset (initial) state.
/// `behavior_logprobs[t]` is the log-probability the sampling policy
/// assigned to `actions[t]` at `states[t]`. `episode_time[t]` counts steps
/// since the episode started (episodes may span batches).
#[derive(Debug, Clone)]
pub struct TransitionBatch {
    states: Vec<usize>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    next_states: Vec<usize>,
    terminals: Vec<bool>,
    behavior_logprobs: Vec<f64>,
    episode_time: Vec<u32>,
    completed_returns: Vec<f64>,
    num_envs: usize,
    horizon: usize,
}

impl TransitionBatch {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        states: Vec<usize>,
        actions: Vec<usize>,
        rewards: Vec<f64>,
        next_states: Vec<usize>,
        terminals: Vec<bool>,
        behavior_logprobs: Vec<f64>,
        episode_time: Vec<u32>,
        completed_returns: Vec<f64>,
        num_envs: usize,
        horizon: usize,
    ) -> Result<Self, MdpError> {
        let t = states.len();
        let lengths_ok = actions.len() == t
            && rewards.len() == t
            && next_states.len() == t
            && terminals.len() == t
            && behavior_logprobs.len() == t
            && episode_time.len() == t
            && num_envs * horizon == t;
        if !lengths_ok {
            return Err(MdpError::BatchLength);
        }
        Ok(Self {
            states,
            actions,
            rewards,
            next_states,
            terminals,
            behavior_logprobs,
            episode_time,
            completed_returns,
            num_envs,
            horizon,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn num_envs(&self) -> usize {
        self.num_envs
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn states(&self) -> &[usize] {
        &self.states
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn next_states(&self) -> &[usize] {
        &self.next_states
    }

    pub fn terminals(&self) -> &[bool] {
        &self.terminals
    }

    pub fn behavior_logprobs(&self) -> &[f64] {
        &self.behavior_logprobs
    }

    pub fn episode_time(&self) -> &[u32] {
        &self.episode_time
    }

    /// Undiscounted returns of episodes that finished inside this batch.
    pub fn completed_returns(&self) -> &[f64] {
        &self.completed_returns
    }

    /// Index range of environment `env`'s contiguous segment.
    pub fn env_range(&self, env: usize) -> std::ops::Range<usize> {
        env * self.horizon..(env + 1) * self.horizon
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    /// Two-state chain: action 0 moves 0 -> 1 -> 1, action 1 stays.
    pub(crate) fn two_state_chain(gamma: f64) -> TabularMdp {
        let mut transition = Array3::zeros((2, 2, 2));
        transition[[0, 0, 1]] = 1.0;
        transition[[0, 1, 0]] = 1.0;
        transition[[1, 0, 1]] = 1.0;
        transition[[1, 1, 1]] = 1.0;
        let reward = arr2(&[[1.0, 0.0], [0.5, 0.5]]);
        TabularMdp::new(transition, reward, gamma, 0, &[]).unwrap()
    }

    #[test]
    fn rejects_bad_row_sum() {
        let mut transition = Array3::zeros((1, 1, 1));
        transition[[0, 0, 0]] = 0.5;
        let reward = arr2(&[[0.0]]);
        let err = TabularMdp::new(transition, reward, 0.9, 0, &[]).unwrap_err();
        assert!(matches!(err, MdpError::RowSum { .. }));
    }

    #[test]
    fn rejects_reward_outside_unit_interval() {
        let mut transition = Array3::zeros((1, 1, 1));
        transition[[0, 0, 0]] = 1.0;
        let reward = arr2(&[[1.5]]);
        let err = TabularMdp::new(transition, reward, 0.9, 0, &[]).unwrap_err();
        assert!(matches!(err, MdpError::RewardRange { .. }));
    }

    #[test]
    fn rejects_gamma_of_one() {
        let mut transition = Array3::zeros((1, 1, 1));
        transition[[0, 0, 0]] = 1.0;
        let reward = arr2(&[[0.0]]);
        let err = TabularMdp::new(transition, reward, 1.0, 0, &[]).unwrap_err();
        assert!(matches!(err, MdpError::GammaRange(_)));
    }

    #[test]
    fn rejects_terminal_without_self_loop() {
        let mdp = two_state_chain(0.9);
        let err = TabularMdp::new(
            mdp.transition().clone(),
            mdp.reward().clone(),
            0.9,
            0,
            &[0],
        )
        .unwrap_err();
        assert!(matches!(err, MdpError::TerminalSelfLoop(0)));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mdp = build_four_rooms(0.37, 0.95).unwrap();
        let text = mdp.to_json_string();
        let back = TabularMdp::from_json_str(&text).unwrap();
        assert_eq!(mdp, back);
    }

    #[test]
    fn policy_rejects_negative_entries() {
        let probs = arr2(&[[1.5, -0.5]]);
        assert!(matches!(
            TabularPolicy::new(probs).unwrap_err(),
            MdpError::PolicyNegative { .. }
        ));
    }

    #[test]
    fn uniform_policy_rows_sum_to_one() {
        let pi = TabularPolicy::uniform(7, 3);
        for row in pi.probs().rows() {
            assert!((row.sum() - 1.0).abs() <= ROW_SUM_TOL);
        }
    }
}
