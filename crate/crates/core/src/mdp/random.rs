//! Seeded random MDP generator for property suites.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MdpError, TabularMdp, TabularPolicy};

/// Draws a random policy with Dirichlet(1, ..., 1) rows.
pub fn random_policy<R: Rng>(num_states: usize, num_actions: usize, rng: &mut R) -> TabularPolicy {
    let mut probs = Array2::zeros((num_states, num_actions));
    for s in 0..num_states {
        let mut sum = 0.0;
        for a in 0..num_actions {
            let e = -(1.0 - rng.random::<f64>()).ln();
            probs[[s, a]] = e;
            sum += e;
        }
        for a in 0..num_actions {
            probs[[s, a]] /= sum;
        }
    }
    TabularPolicy::new(probs).expect("normalized rows form a policy")
}

/// Builds a dense random MDP: each transition row is Dirichlet(1, ..., 1)
/// (exponential draws, normalized) and rewards are uniform on [0, 1).
/// Deterministic for a given seed. No terminal states; the initial state
/// is 0.
pub fn build_random_mdp(
    num_states: usize,
    num_actions: usize,
    gamma: f64,
    seed: u64,
) -> Result<TabularMdp, MdpError> {
    if num_states == 0 || num_actions == 0 {
        return Err(MdpError::EmptySpace { states: num_states, actions: num_actions });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transition = Array3::zeros((num_states, num_actions, num_states));
    let mut reward = Array2::zeros((num_states, num_actions));
    for s in 0..num_states {
        for a in 0..num_actions {
            let mut sum = 0.0;
            for s2 in 0..num_states {
                // Exp(1) via inverse CDF; 1 - u stays strictly positive.
                let e = -(1.0 - rng.random::<f64>()).ln();
                transition[[s, a, s2]] = e;
                sum += e;
            }
            for s2 in 0..num_states {
                transition[[s, a, s2]] /= sum;
            }
            reward[[s, a]] = rng.random::<f64>();
        }
    }
    TabularMdp::new(transition, reward, gamma, 0, &[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::ROW_SUM_TOL;

    #[test]
    fn rejects_empty_spaces() {
        assert!(build_random_mdp(0, 2, 0.9, 1).is_err());
        assert!(build_random_mdp(2, 0, 0.9, 1).is_err());
    }

    #[test]
    fn single_absorbing_state_has_geometric_value() {
        let mdp = build_random_mdp(1, 1, 0.5, 42).unwrap();
        let r = mdp.reward()[[0, 0]];
        // Q(s, a) = r / (1 - gamma) = 2 r for the one-state MDP.
        let q = crate::oracle::evaluate_policy_exact(&mdp, &crate::mdp::TabularPolicy::uniform(1, 1));
        assert!((q.q[[0, 0]] - 2.0 * r).abs() < 1e-12);
    }

    #[test]
    fn same_seed_reproduces_field_for_field() {
        let a = build_random_mdp(6, 3, 0.9, 7).unwrap();
        let b = build_random_mdp(6, 3, 0.9, 7).unwrap();
        assert_eq!(a, b);
        let c = build_random_mdp(6, 3, 0.9, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rows_sum_to_one() {
        let mdp = build_random_mdp(10, 3, 0.9, 7).unwrap();
        for s in 0..10 {
            for a in 0..3 {
                let sum: f64 = (0..10).map(|s2| mdp.transition()[[s, a, s2]]).sum();
                assert!((sum - 1.0).abs() <= ROW_SUM_TOL);
            }
        }
    }
}
