//! Exact tabular computations: policy evaluation, visitation
//! distributions, value iteration, the performance-difference identity,
//! and distribution distances.
//!
//! These are the ground truth the estimators, networks, and training loop
//! are verified against, so everything here favors exactness over scale:
//! dense linear solves up to [`DENSE_SOLVE_MAX_STATES`] states, a
//! fixed-point fallback above that.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::mdp::{TabularMdp, TabularPolicy};

/// Largest state count solved with a dense LU factorization.
pub const DENSE_SOLVE_MAX_STATES: usize = 2048;

/// Actions within this distance of the per-state maximum share greedy
/// probability equally.
pub const GREEDY_TIE_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("vector lengths disagree: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(
        "performance-difference identity violated: advantage form {lhs}, value gap {rhs} \
         (|diff| = {diff:e})"
    )]
    PdlIdentity { lhs: f64, rhs: f64, diff: f64 },
}

/// Exact V, Q, and advantage of one policy.
#[derive(Debug, Clone)]
pub struct ExactEvaluation {
    /// V per state.
    pub v: Array1<f64>,
    /// Q per (state, action).
    pub q: Array2<f64>,
    /// Advantage Q - V per (state, action).
    pub adv: Array2<f64>,
}

/// Discounted state-action visitation distribution, normalized to sum
/// to one.
#[derive(Debug, Clone)]
pub struct VisitationDistribution {
    pub d: Array2<f64>,
}

impl VisitationDistribution {
    /// Marginal over states.
    pub fn state_marginal(&self) -> Array1<f64> {
        self.d.sum_axis(ndarray::Axis(1))
    }
}

/// State-to-state transition matrix under `policy` (row-stochastic).
fn policy_transition(mdp: &TabularMdp, policy: &TabularPolicy) -> DMatrix<f64> {
    let n = mdp.num_states();
    let mut m = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..mdp.num_actions() {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            for s2 in 0..n {
                m[(s, s2)] += pa * mdp.transition()[[s, a, s2]];
            }
        }
    }
    m
}

fn policy_reward(mdp: &TabularMdp, policy: &TabularPolicy) -> DVector<f64> {
    let n = mdp.num_states();
    DVector::from_fn(n, |s, _| {
        (0..mdp.num_actions()).map(|a| policy.prob(s, a) * mdp.reward()[[s, a]]).sum()
    })
}

/// Solves (I - gamma * P) x = b with a dense LU factorization.
fn solve_discounted(p: &DMatrix<f64>, gamma: f64, b: &DVector<f64>) -> DVector<f64> {
    let n = p.nrows();
    let mut m = -gamma * p;
    for i in 0..n {
        m[(i, i)] += 1.0;
    }
    m.lu().solve(b).expect("I - gamma*P is nonsingular for gamma < 1")
}

/// Fixed-point iteration for (I - gamma * P) x = b, i.e. x <- b + gamma*P*x,
/// used above [`DENSE_SOLVE_MAX_STATES`] states. Converges geometrically
/// for gamma < 1; iterates until the sup-norm update is below `tol`.
fn solve_discounted_iterative(
    p: &DMatrix<f64>,
    gamma: f64,
    b: &DVector<f64>,
    tol: f64,
) -> DVector<f64> {
    let mut x = b.clone();
    loop {
        let next = b + gamma * p * &x;
        let delta = (&next - &x).amax();
        x = next;
        if delta <= tol {
            return x;
        }
    }
}

fn solve_value(p: &DMatrix<f64>, gamma: f64, b: &DVector<f64>) -> DVector<f64> {
    if p.nrows() <= DENSE_SOLVE_MAX_STATES {
        solve_discounted(p, gamma, b)
    } else {
        solve_discounted_iterative(p, gamma, b, 1e-14)
    }
}

/// Exact policy evaluation by linear solve.
///
/// Solves V = r_pi + gamma * P_pi * V, then derives
/// Q(s, a) = r(s, a) + gamma * sum_s' P(s'|s,a) V(s') and A = Q - V.
pub fn evaluate_policy_exact(mdp: &TabularMdp, policy: &TabularPolicy) -> ExactEvaluation {
    policy.check_compatible(mdp).expect("policy must match the MDP");
    let n = mdp.num_states();
    let na = mdp.num_actions();
    let p = policy_transition(mdp, policy);
    let r = policy_reward(mdp, policy);
    let gamma = mdp.gamma();
    let v_vec = solve_value(&p, gamma, &r);

    let mut q = Array2::zeros((n, na));
    let mut adv = Array2::zeros((n, na));
    for s in 0..n {
        for a in 0..na {
            let mut backup = 0.0;
            for s2 in 0..n {
                backup += mdp.transition()[[s, a, s2]] * v_vec[s2];
            }
            q[[s, a]] = mdp.reward()[[s, a]] + gamma * backup;
            adv[[s, a]] = q[[s, a]] - v_vec[s];
        }
    }
    let v = Array1::from_iter(v_vec.iter().copied());

    #[cfg(debug_assertions)]
    {
        let residual = bellman_residual(mdp, policy, &q);
        debug_assert!(residual <= 1e-10, "Bellman residual {residual:e} too large");
    }

    ExactEvaluation { v, q, adv }
}

/// Sup-norm residual of the Q fixed-point equation; exposed for tests.
pub fn bellman_residual(mdp: &TabularMdp, policy: &TabularPolicy, q: &Array2<f64>) -> f64 {
    let n = mdp.num_states();
    let na = mdp.num_actions();
    let mut worst: f64 = 0.0;
    for s in 0..n {
        for a in 0..na {
            let mut backup = 0.0;
            for s2 in 0..n {
                let mut inner = 0.0;
                for a2 in 0..na {
                    inner += policy.prob(s2, a2) * q[[s2, a2]];
                }
                backup += mdp.transition()[[s, a, s2]] * inner;
            }
            let rhs = mdp.reward()[[s, a]] + mdp.gamma() * backup;
            worst = worst.max((q[[s, a]] - rhs).abs());
        }
    }
    worst
}

/// Exact discounted state-action visitation distribution from the initial
/// state: d(s, a) = (1 - gamma) * sum_t gamma^t P(s_t = s, a_t = a).
///
/// The state marginal solves (I - gamma * P_pi^T) d = (1 - gamma) e_s0.
pub fn visitation_distribution(mdp: &TabularMdp, policy: &TabularPolicy) -> VisitationDistribution {
    policy.check_compatible(mdp).expect("policy must match the MDP");
    let n = mdp.num_states();
    let gamma = mdp.gamma();
    let p_t = policy_transition(mdp, policy).transpose();
    let mut b = DVector::zeros(n);
    b[mdp.initial_state()] = 1.0 - gamma;
    let d_state = solve_value(&p_t, gamma, &b);

    let mut d = Array2::zeros((n, mdp.num_actions()));
    for s in 0..n {
        for a in 0..mdp.num_actions() {
            d[[s, a]] = d_state[s] * policy.prob(s, a);
        }
    }
    VisitationDistribution { d }
}

/// Bellman-optimality iteration from V = 0.
///
/// Returns the value estimate after `num_iters` sweeps and the greedy
/// policy, with actions within [`GREEDY_TIE_TOL`] of the maximum sharing
/// probability equally.
pub fn value_iteration(mdp: &TabularMdp, num_iters: usize) -> (Array1<f64>, TabularPolicy) {
    assert!(num_iters >= 1, "need at least one sweep");
    let n = mdp.num_states();
    let na = mdp.num_actions();
    let mut v = vec![0.0; n];
    let mut q_row = vec![0.0; na];
    for _ in 0..num_iters {
        let mut next = vec![0.0; n];
        for s in 0..n {
            let mut best = f64::NEG_INFINITY;
            for a in 0..na {
                let mut backup = 0.0;
                for s2 in 0..n {
                    backup += mdp.transition()[[s, a, s2]] * v[s2];
                }
                best = best.max(mdp.reward()[[s, a]] + mdp.gamma() * backup);
            }
            next[s] = best;
        }
        v = next;
    }

    let mut probs = Array2::zeros((n, na));
    for s in 0..n {
        let mut best = f64::NEG_INFINITY;
        for a in 0..na {
            let mut backup = 0.0;
            for s2 in 0..n {
                backup += mdp.transition()[[s, a, s2]] * v[s2];
            }
            q_row[a] = mdp.reward()[[s, a]] + mdp.gamma() * backup;
            best = best.max(q_row[a]);
        }
        let ties: Vec<usize> = (0..na).filter(|&a| q_row[a] >= best - GREEDY_TIE_TOL).collect();
        let share = 1.0 / ties.len() as f64;
        for a in ties {
            probs[[s, a]] = share;
        }
    }
    let policy = TabularPolicy::new(probs).expect("greedy rows are distributions");
    (Array1::from_vec(v), policy)
}

/// Performance difference of `pi_prime` over `pi` via the advantage
/// decomposition: (1 / (1 - gamma)) E_{d^{pi'}} A^{pi}.
///
/// Also evaluates both policies directly and errors if the two routes
/// disagree by more than 1e-8, which would indicate an oracle bug.
pub fn performance_difference(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    pi_prime: &TabularPolicy,
) -> Result<f64, OracleError> {
    let eval = evaluate_policy_exact(mdp, pi);
    let d_prime = visitation_distribution(mdp, pi_prime);
    let expected_adv: f64 = (&d_prime.d * &eval.adv).sum();
    let lhs = expected_adv / (1.0 - mdp.gamma());

    let eval_prime = evaluate_policy_exact(mdp, pi_prime);
    let s0 = mdp.initial_state();
    let rhs = eval_prime.v[s0] - eval.v[s0];
    let diff = (lhs - rhs).abs();
    if diff > 1e-8 {
        return Err(OracleError::PdlIdentity { lhs, rhs, diff });
    }
    Ok(lhs)
}

/// Total-variation distance between two distributions of equal length:
/// half the L1 distance.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64, OracleError> {
    if p.len() != q.len() {
        return Err(OracleError::LengthMismatch(p.len(), q.len()));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// KL divergence sum_i p_i ln(p_i / q_i), with 0 ln 0 = 0 and infinity
/// where q has a zero that p does not.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return f64::INFINITY;
        }
        kl += pi * (pi / qi).ln();
    }
    kl
}

/// Stationary state-action distribution of the chain induced by `policy`
/// with auto-reset: transitions into terminal states are redirected to the
/// initial state, matching what rollouts record.
///
/// Solves (I - P^T + 1 1^T) x = 1, which has the stationary distribution
/// as its unique solution when the chain has a single recurrent class.
pub fn reset_chain_stationary(mdp: &TabularMdp, policy: &TabularPolicy) -> Array2<f64> {
    policy.check_compatible(mdp).expect("policy must match the MDP");
    let n = mdp.num_states();
    let s0 = mdp.initial_state();
    let mut chain = DMatrix::zeros(n, n);
    for s in 0..n {
        for a in 0..mdp.num_actions() {
            let pa = policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            for s2 in 0..n {
                let target = if mdp.is_terminal(s2) { s0 } else { s2 };
                chain[(s, target)] += pa * mdp.transition()[[s, a, s2]];
            }
        }
    }
    let mut m = DMatrix::from_element(n, n, 1.0) - chain.transpose();
    for i in 0..n {
        m[(i, i)] += 1.0;
    }
    let b = DVector::from_element(n, 1.0);
    let x = m.lu().solve(&b).expect("reset chain has a unique stationary distribution");

    let mut d = Array2::zeros((n, mdp.num_actions()));
    for s in 0..n {
        for a in 0..mdp.num_actions() {
            d[[s, a]] = x[s] * policy.prob(s, a);
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{build_four_rooms, build_random_mdp, random_policy};
    use ndarray::{arr2, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_state_mdp(r: f64, gamma: f64) -> TabularMdp {
        let mut transition = Array3::zeros((1, 1, 1));
        transition[[0, 0, 0]] = 1.0;
        TabularMdp::new(transition, arr2(&[[r]]), gamma, 0, &[]).unwrap()
    }

    #[test]
    fn single_state_geometric_series() {
        let mdp = one_state_mdp(1.0, 0.5);
        let pi = TabularPolicy::uniform(1, 1);
        let eval = evaluate_policy_exact(&mdp, &pi);
        assert!((eval.q[[0, 0]] - 2.0).abs() < 1e-12);
        assert!((eval.v[0] - 2.0).abs() < 1e-12);
        assert!(eval.adv[[0, 0]].abs() < 1e-12);
    }

    #[test]
    fn evaluation_invariants_on_random_mdps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..20 {
            let gamma = if seed % 2 == 0 { 0.9 } else { 0.99 };
            let mdp = build_random_mdp(12, 4, gamma, seed).unwrap();
            let pi = random_policy(12, 4, &mut rng);
            let eval = evaluate_policy_exact(&mdp, &pi);
            let bound = 1.0 / (1.0 - gamma);
            for s in 0..12 {
                // V(s) = sum_a pi(a|s) Q(s,a); advantages average to zero.
                let mut vq = 0.0;
                let mut mean_adv = 0.0;
                for a in 0..4 {
                    vq += pi.prob(s, a) * eval.q[[s, a]];
                    mean_adv += pi.prob(s, a) * eval.adv[[s, a]];
                    assert!((eval.adv[[s, a]] - (eval.q[[s, a]] - eval.v[s])).abs() <= 1e-12);
                    assert!(eval.q[[s, a]] <= bound + 1e-10);
                }
                assert!((vq - eval.v[s]).abs() <= 1e-10);
                assert!(mean_adv.abs() <= 1e-10);
            }
            assert!(bellman_residual(&mdp, &pi, &eval.q) <= 1e-10);
        }
    }

    #[test]
    fn linear_solve_matches_fixed_point_iteration() {
        let mdp = build_random_mdp(10, 3, 0.9, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pi = random_policy(10, 3, &mut rng);
        let eval = evaluate_policy_exact(&mdp, &pi);

        // Independent oracle: iterate Q <- r + gamma P (pi . Q) 10,000 times.
        let mut q = Array2::<f64>::zeros((10, 3));
        for _ in 0..10_000 {
            let mut next = Array2::<f64>::zeros((10, 3));
            for s in 0..10 {
                for a in 0..3 {
                    let mut backup = 0.0;
                    for s2 in 0..10 {
                        let mut inner = 0.0;
                        for a2 in 0..3 {
                            inner += pi.prob(s2, a2) * q[[s2, a2]];
                        }
                        backup += mdp.transition()[[s, a, s2]] * inner;
                    }
                    next[[s, a]] = mdp.reward()[[s, a]] + mdp.gamma() * backup;
                }
            }
            q = next;
        }
        for s in 0..10 {
            for a in 0..3 {
                assert!((q[[s, a]] - eval.q[[s, a]]).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn iterative_fallback_agrees_with_dense_solve() {
        let mdp = build_random_mdp(15, 3, 0.95, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pi = random_policy(15, 3, &mut rng);
        let p = policy_transition(&mdp, &pi);
        let r = policy_reward(&mdp, &pi);
        let dense = solve_discounted(&p, mdp.gamma(), &r);
        let iterative = solve_discounted_iterative(&p, mdp.gamma(), &r, 1e-14);
        assert!((dense - iterative).amax() <= 1e-10);
    }

    #[test]
    fn visitation_sums_to_one_and_concentrates_on_absorbing_pairs() {
        let mdp = one_state_mdp(0.3, 0.8);
        let pi = TabularPolicy::uniform(1, 1);
        let d = visitation_distribution(&mdp, &pi);
        assert!((d.d[[0, 0]] - 1.0).abs() <= 1e-10);

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for seed in 0..10 {
            let mdp = build_random_mdp(9, 3, 0.95, seed).unwrap();
            let pi = random_policy(9, 3, &mut rng);
            let d = visitation_distribution(&mdp, &pi);
            assert!((d.d.sum() - 1.0).abs() <= 1e-10);
            assert!(d.d.iter().all(|&x| x >= -1e-15));
        }
    }

    #[test]
    fn visitation_matches_truncated_series() {
        let mdp = build_random_mdp(8, 3, 0.9, 33).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pi = random_policy(8, 3, &mut rng);
        let d = visitation_distribution(&mdp, &pi);

        // Independent oracle: sum_{t<=500} gamma^t P(s_t = s) by forward
        // propagation of the state distribution.
        let n = 8;
        let gamma = mdp.gamma();
        let mut state_dist = vec![0.0; n];
        state_dist[mdp.initial_state()] = 1.0;
        let mut acc = vec![0.0; n];
        let mut discount = 1.0;
        for _ in 0..=500 {
            for s in 0..n {
                acc[s] += discount * state_dist[s];
            }
            let mut next = vec![0.0; n];
            for s in 0..n {
                if state_dist[s] == 0.0 {
                    continue;
                }
                for a in 0..3 {
                    let pa = pi.prob(s, a) * state_dist[s];
                    for s2 in 0..n {
                        next[s2] += pa * mdp.transition()[[s, a, s2]];
                    }
                }
            }
            state_dist = next;
            discount *= gamma;
        }
        for s in 0..n {
            for a in 0..3 {
                let expect = (1.0 - gamma) * acc[s] * pi.prob(s, a);
                assert!((d.d[[s, a]] - expect).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn myopic_value_iteration_returns_max_reward() {
        let mdp = build_random_mdp(6, 4, 0.0, 9).unwrap();
        let (v, _) = value_iteration(&mdp, 5);
        for s in 0..6 {
            let best = (0..4).map(|a| mdp.reward()[[s, a]]).fold(f64::NEG_INFINITY, f64::max);
            assert!((v[s] - best).abs() <= 1e-12);
        }
    }

    #[test]
    fn four_rooms_optimum_is_positive_and_reaches_goal() {
        let mdp = build_four_rooms(0.8, 0.99).unwrap();
        let (v, greedy) = value_iteration(&mdp, 10_000);
        assert!(v[mdp.initial_state()] > 0.0);
        // The greedy policy's visitation distribution puts mass on the goal.
        let d = visitation_distribution(&mdp, &greedy);
        let goal = mdp.terminal_states()[0];
        let goal_mass: f64 = (0..4).map(|a| d.d[[goal, a]]).sum();
        assert!(goal_mass > 0.0, "optimal policy never reaches the goal");
    }

    #[test]
    fn value_iteration_dominates_random_policies() {
        let mdp = build_random_mdp(12, 3, 0.9, 14).unwrap();
        let (v_star, _) = value_iteration(&mdp, 4_000);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..50 {
            let pi = random_policy(12, 3, &mut rng);
            let eval = evaluate_policy_exact(&mdp, &pi);
            for s in 0..12 {
                assert!(v_star[s] >= eval.v[s] - 1e-8);
            }
        }
    }

    #[test]
    fn greedy_ties_share_probability_equally() {
        // Two identical actions everywhere: greedy weight must split 50/50.
        let mut transition = Array3::zeros((2, 2, 2));
        for s in 0..2 {
            for a in 0..2 {
                transition[[s, a, (s + 1) % 2]] = 1.0;
            }
        }
        let reward = arr2(&[[0.5, 0.5], [0.2, 0.2]]);
        let mdp = TabularMdp::new(transition, reward, 0.9, 0, &[]).unwrap();
        let (_, greedy) = value_iteration(&mdp, 500);
        for s in 0..2 {
            for a in 0..2 {
                assert!((greedy.prob(s, a) - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn performance_difference_of_identical_policies_is_zero() {
        let mdp = build_random_mdp(7, 3, 0.9, 2).unwrap();
        let pi = TabularPolicy::uniform(7, 3);
        let gap = performance_difference(&mdp, &pi, &pi).unwrap();
        assert!(gap.abs() <= 1e-10);
    }

    #[test]
    fn performance_difference_four_rooms_uniform_vs_optimal() {
        let mdp = build_four_rooms(0.8, 0.99).unwrap();
        let uniform = TabularPolicy::uniform(104, 4);
        let (_, optimal) = value_iteration(&mdp, 10_000);
        let gap = performance_difference(&mdp, &uniform, &optimal).unwrap();
        assert!(gap > 0.0);
        let v_uni = evaluate_policy_exact(&mdp, &uniform).v[mdp.initial_state()];
        let v_opt = evaluate_policy_exact(&mdp, &optimal).v[mdp.initial_state()];
        assert!((gap - (v_opt - v_uni)).abs() <= 1e-8);
    }

    #[test]
    fn tv_distance_basics() {
        assert_eq!(tv_distance(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        assert!((tv_distance(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(tv_distance(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn kl_divergence_basics() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).is_infinite());
        assert!(kl_divergence(&[0.0, 1.0], &[0.5, 0.5]) > 0.0);
    }

    #[test]
    fn stationary_distribution_is_a_fixed_point() {
        let mdp = build_four_rooms(0.8, 0.99).unwrap();
        let pi = TabularPolicy::uniform(104, 4);
        let d = reset_chain_stationary(&mdp, &pi);
        assert!((d.sum() - 1.0).abs() <= 1e-10);
        // Push the state marginal through the reset chain once: unchanged.
        let marginal = d.sum_axis(ndarray::Axis(1));
        let n = mdp.num_states();
        let s0 = mdp.initial_state();
        let mut pushed = vec![0.0; n];
        for s in 0..n {
            for a in 0..4 {
                let w = marginal[s] * pi.prob(s, a);
                for s2 in 0..n {
                    let target = if mdp.is_terminal(s2) { s0 } else { s2 };
                    pushed[target] += w * mdp.transition()[[s, a, s2]];
                }
            }
        }
        for s in 0..n {
            assert!((pushed[s] - marginal[s]).abs() <= 1e-10);
        }
    }
}
