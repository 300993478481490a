//! Seeded trajectory sampling with auto-resetting environments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{TabularMdp, TabularPolicy, TransitionBatch};

/// Anything that can drive data collection: a tabular policy or a policy
/// network. `log_prob` must use the same code path later importance ratios
/// use, so that on-policy ratios come out exactly one.
pub trait BehaviorSampler {
    /// Writes the action distribution at `state` into `buf`.
    fn action_probs(&self, state: usize, buf: &mut Vec<f64>);
    /// Log-probability of `action` at `state`.
    fn log_prob(&self, state: usize, action: usize) -> f64;
}

impl BehaviorSampler for TabularPolicy {
    fn action_probs(&self, state: usize, buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend(self.row(state).iter().copied());
    }

    fn log_prob(&self, state: usize, action: usize) -> f64 {
        self.prob(state, action).ln()
    }
}

/// SplitMix64; used to derive independent per-environment seeds.
fn split_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws an index from `weights` (assumed to sum to one).
fn sample_categorical(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last_positive = i;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave acc slightly below 1; fall back to the last
    // positive-probability entry.
    last_positive
}

/// A set of independently seeded environments that persist across rollouts.
///
/// Each environment owns its own generator, so results do not depend on
/// the order environments are stepped in. Episodes reset to the initial
/// state when a terminal state is entered.
pub struct EnvPool<'a> {
    mdp: &'a TabularMdp,
    states: Vec<usize>,
    episode_time: Vec<u32>,
    episode_return: Vec<f64>,
    rngs: Vec<ChaCha8Rng>,
}

impl<'a> EnvPool<'a> {
    pub fn new(mdp: &'a TabularMdp, num_envs: usize, seed: u64) -> Self {
        assert!(num_envs >= 1, "need at least one environment");
        let rngs = (0..num_envs)
            .map(|i| ChaCha8Rng::seed_from_u64(split_seed(seed, i as u64)))
            .collect();
        Self {
            mdp,
            states: vec![mdp.initial_state(); num_envs],
            episode_time: vec![0; num_envs],
            episode_return: vec![0.0; num_envs],
            rngs,
        }
    }

    pub fn num_envs(&self) -> usize {
        self.states.len()
    }

    /// Collects `horizon` steps from every environment under `policy`.
    /// The batch is laid out env-major: environment `e` owns the
    /// contiguous index range `e * horizon .. (e + 1) * horizon`.
    pub fn rollout<B: BehaviorSampler>(&mut self, policy: &B, horizon: usize) -> TransitionBatch {
        assert!(horizon >= 1, "horizon must be at least 1");
        let num_envs = self.num_envs();
        let total = num_envs * horizon;
        let mut states = Vec::with_capacity(total);
        let mut actions = Vec::with_capacity(total);
        let mut rewards = Vec::with_capacity(total);
        let mut next_states = Vec::with_capacity(total);
        let mut terminals = Vec::with_capacity(total);
        let mut behavior_logprobs = Vec::with_capacity(total);
        let mut episode_time = Vec::with_capacity(total);
        let mut completed_returns = Vec::new();

        let mut probs = Vec::new();
        for e in 0..num_envs {
            for _ in 0..horizon {
                let s = self.states[e];
                policy.action_probs(s, &mut probs);
                let a = sample_categorical(&mut self.rngs[e], &probs);
                let r = self.mdp.reward()[[s, a]];
                let row = self.mdp.transition();
                let next_weights: Vec<f64> =
                    (0..self.mdp.num_states()).map(|s2| row[[s, a, s2]]).collect();
                let sampled_next = sample_categorical(&mut self.rngs[e], &next_weights);
                let done = self.mdp.is_terminal(sampled_next);

                states.push(s);
                actions.push(a);
                rewards.push(r);
                terminals.push(done);
                behavior_logprobs.push(policy.log_prob(s, a));
                episode_time.push(self.episode_time[e]);

                self.episode_return[e] += r;
                if done {
                    next_states.push(self.mdp.initial_state());
                    self.states[e] = self.mdp.initial_state();
                    self.episode_time[e] = 0;
                    completed_returns.push(self.episode_return[e]);
                    self.episode_return[e] = 0.0;
                } else {
                    next_states.push(sampled_next);
                    self.states[e] = sampled_next;
                    self.episode_time[e] += 1;
                }
            }
        }

        TransitionBatch::from_parts(
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
        )
        .expect("pool assembles consistent batches")
    }
}

/// One-shot rollout: fresh environments starting at the initial state.
pub fn rollout(
    mdp: &TabularMdp,
    policy: &TabularPolicy,
    horizon: usize,
    num_envs: usize,
    seed: u64,
) -> TransitionBatch {
    EnvPool::new(mdp, num_envs, seed).rollout(policy, horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array3};

    fn deterministic_chain() -> TabularMdp {
        // 0 -> 1 -> 2 (terminal); single action.
        let mut transition = Array3::zeros((3, 1, 3));
        transition[[0, 0, 1]] = 1.0;
        transition[[1, 0, 2]] = 1.0;
        transition[[2, 0, 2]] = 1.0;
        let reward = arr2(&[[0.0], [1.0], [0.0]]);
        TabularMdp::new(transition, reward, 0.9, 0, &[2]).unwrap()
    }

    #[test]
    fn deterministic_chain_is_exactly_predictable() {
        let mdp = deterministic_chain();
        let policy = TabularPolicy::uniform(3, 1);
        let batch = rollout(&mdp, &policy, 5, 1, 0);
        assert_eq!(batch.states(), &[0, 1, 0, 1, 0]);
        assert_eq!(batch.next_states(), &[1, 0, 1, 0, 1]);
        assert_eq!(batch.terminals(), &[false, true, false, true, false]);
        assert_eq!(batch.rewards(), &[0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(batch.episode_time(), &[0, 1, 0, 1, 0]);
        assert_eq!(batch.completed_returns(), &[1.0, 1.0]);
    }

    #[test]
    fn behavior_logprobs_match_the_policy_exactly() {
        let mdp = crate::mdp::build_four_rooms(0.8, 0.99).unwrap();
        let mut probs = arr2(&[[0.0; 4]; 104]);
        for s in 0..104 {
            probs[[s, 0]] = 0.1;
            probs[[s, 1]] = 0.2;
            probs[[s, 2]] = 0.3;
            probs[[s, 3]] = 0.4;
        }
        let policy = TabularPolicy::new(probs).unwrap();
        let batch = rollout(&mdp, &policy, 200, 2, 9);
        for t in 0..batch.len() {
            let expect = policy.prob(batch.states()[t], batch.actions()[t]).ln();
            assert_eq!(batch.behavior_logprobs()[t], expect);
        }
    }

    #[test]
    fn rollouts_are_bit_reproducible_under_a_seed() {
        let mdp = crate::mdp::build_four_rooms(0.8, 0.99).unwrap();
        let policy = TabularPolicy::uniform(104, 4);
        let a = rollout(&mdp, &policy, 64, 4, 123);
        let b = rollout(&mdp, &policy, 64, 4, 123);
        assert_eq!(a.states(), b.states());
        assert_eq!(a.actions(), b.actions());
        assert_eq!(a.behavior_logprobs(), b.behavior_logprobs());
        let c = rollout(&mdp, &policy, 64, 4, 124);
        assert_ne!(a.states(), c.states());
    }

    #[test]
    fn zero_probability_actions_are_never_sampled() {
        let mdp = crate::mdp::build_four_rooms(0.5, 0.99).unwrap();
        let mut probs = arr2(&[[0.0; 4]; 104]);
        for s in 0..104 {
            probs[[s, 1]] = 0.5;
            probs[[s, 3]] = 0.5;
        }
        let policy = TabularPolicy::new(probs).unwrap();
        let batch = rollout(&mdp, &policy, 500, 1, 5);
        assert!(batch.actions().iter().all(|&a| a == 1 || a == 3));
    }
}
