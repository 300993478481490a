//! Small differentiable actor-critic over tabular observations.
//!
//! Both heads are single-hidden-layer tanh perceptrons (or plain linear
//! maps when the hidden width is zero) with hand-written forward and
//! backward passes, so every gradient used by the training loop is
//! analytic and checkable against finite differences. Policy parameters
//! can be frozen into an immutable [`Snapshot`], which is how the training
//! loop keeps a fixed target policy while the live parameters move.

mod adam;
mod losses;

pub use adam::{clip_global_norm, global_norm, Adam};
pub use losses::{mean_entropy, ppo_policy_loss, value_loss, LossError};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::mdp::{BehaviorSampler, FourRoomsLayout, TabularPolicy};

/// State featurization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Features {
    /// One indicator per state.
    OneHot { num_states: usize },
    /// Precomputed dense feature vector per state.
    Table { rows: Vec<Vec<f64>> },
}

impl Features {
    /// Normalized (row, col) coordinates for a gridworld; a deliberately
    /// coarse featurization that exercises misgeneralization.
    pub fn grid_xy(layout: &FourRoomsLayout) -> Self {
        let rows = (0..layout.num_states())
            .map(|s| {
                let (r, c) = layout.coords_of(s);
                vec![r as f64 / (layout.rows() - 1) as f64, c as f64 / (layout.cols() - 1) as f64]
            })
            .collect();
        Features::Table { rows }
    }

    pub fn dim(&self) -> usize {
        match self {
            Features::OneHot { num_states } => *num_states,
            Features::Table { rows } => rows.first().map_or(0, Vec::len),
        }
    }

    pub fn num_states(&self) -> usize {
        match self {
            Features::OneHot { num_states } => *num_states,
            Features::Table { rows } => rows.len(),
        }
    }

    fn input(&self, state: usize) -> Input<'_> {
        match self {
            Features::OneHot { .. } => Input::OneHot(state),
            Features::Table { rows } => Input::Dense(&rows[state]),
        }
    }
}

/// A network input: either a one-hot index (sparse fast path) or a dense
/// feature vector.
#[derive(Clone, Copy)]
enum Input<'a> {
    OneHot(usize),
    Dense(&'a [f64]),
}

/// A one-hidden-layer tanh perceptron (`hidden_dim == 0` means a plain
/// affine map). Parameters live in one flat vector:
/// `[w1 (h x in), b1 (h), w2 (out x h), b2 (out)]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    params: Vec<f64>,
}

impl Mlp {
    pub fn param_count(input_dim: usize, hidden_dim: usize, output_dim: usize) -> usize {
        if hidden_dim == 0 {
            output_dim * input_dim + output_dim
        } else {
            hidden_dim * input_dim + hidden_dim + output_dim * hidden_dim + output_dim
        }
    }

    fn zeros(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            output_dim,
            params: vec![0.0; Self::param_count(input_dim, hidden_dim, output_dim)],
        }
    }

    /// Orthogonal weights scaled by a gain, zero biases. The output layer
    /// gain controls how far from uniform (or from zero) the net starts.
    fn orthogonal<R: Rng>(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        hidden_gain: f64,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut net = Self::zeros(input_dim, hidden_dim, output_dim);
        if hidden_dim == 0 {
            let w = orthogonal_matrix(output_dim, input_dim, out_gain, rng);
            net.params[..output_dim * input_dim].copy_from_slice(&w);
        } else {
            let w1 = orthogonal_matrix(hidden_dim, input_dim, hidden_gain, rng);
            net.params[..hidden_dim * input_dim].copy_from_slice(&w1);
            let w2 = orthogonal_matrix(output_dim, hidden_dim, out_gain, rng);
            let off = hidden_dim * input_dim + hidden_dim;
            net.params[off..off + output_dim * hidden_dim].copy_from_slice(&w2);
        }
        net
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.params.len(), "parameter vector length mismatch");
        self.params.copy_from_slice(params);
    }

    fn consistent(&self) -> bool {
        self.params.len() == Self::param_count(self.input_dim, self.hidden_dim, self.output_dim)
    }

    /// Forward pass. Writes the outputs into `out` and, when a hidden
    /// layer exists, the post-tanh activations into `hidden` (needed by
    /// [`Mlp::backward`]).
    fn forward(&self, input: Input<'_>, hidden: &mut Vec<f64>, out: &mut Vec<f64>) {
        let (h, d_in, d_out) = (self.hidden_dim, self.input_dim, self.output_dim);
        out.clear();
        hidden.clear();
        if h == 0 {
            let (w, b) = self.params.split_at(d_out * d_in);
            for o in 0..d_out {
                let row = &w[o * d_in..(o + 1) * d_in];
                let acc = match input {
                    Input::OneHot(s) => row[s],
                    Input::Dense(x) => row.iter().zip(x).map(|(wi, xi)| wi * xi).sum(),
                };
                out.push(acc + b[o]);
            }
            return;
        }
        let w1 = &self.params[..h * d_in];
        let b1 = &self.params[h * d_in..h * d_in + h];
        let w2_off = h * d_in + h;
        let w2 = &self.params[w2_off..w2_off + d_out * h];
        let b2 = &self.params[w2_off + d_out * h..];
        for j in 0..h {
            let pre = match input {
                Input::OneHot(s) => w1[j * d_in + s],
                Input::Dense(x) => {
                    w1[j * d_in..(j + 1) * d_in].iter().zip(x).map(|(wi, xi)| wi * xi).sum()
                }
            } + b1[j];
            hidden.push(pre.tanh());
        }
        for o in 0..d_out {
            let row = &w2[o * h..(o + 1) * h];
            let acc: f64 = row.iter().zip(hidden.iter()).map(|(wi, hi)| wi * hi).sum();
            out.push(acc + b2[o]);
        }
    }

    /// Accumulates the parameter gradient of `sum_o d_out[o] * output_o`
    /// into `grad`. `hidden` must come from the matching forward pass.
    fn backward(
        &self,
        input: Input<'_>,
        hidden: &[f64],
        d_out: &[f64],
        dh_scratch: &mut Vec<f64>,
        grad: &mut [f64],
    ) {
        let (h, d_in, n_out) = (self.hidden_dim, self.input_dim, self.output_dim);
        debug_assert_eq!(grad.len(), self.params.len());
        if h == 0 {
            let (gw, gb) = grad.split_at_mut(n_out * d_in);
            for o in 0..n_out {
                let g = d_out[o];
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                match input {
                    Input::OneHot(s) => gw[o * d_in + s] += g,
                    Input::Dense(x) => {
                        for (wi, xi) in gw[o * d_in..(o + 1) * d_in].iter_mut().zip(x) {
                            *wi += g * xi;
                        }
                    }
                }
            }
            return;
        }
        let w2_off = h * d_in + h;
        dh_scratch.clear();
        dh_scratch.resize(h, 0.0);
        {
            let w2 = &self.params[w2_off..w2_off + n_out * h];
            for o in 0..n_out {
                let g = d_out[o];
                if g == 0.0 {
                    continue;
                }
                for j in 0..h {
                    dh_scratch[j] += g * w2[o * h + j];
                }
            }
        }
        // Output layer gradients.
        for o in 0..n_out {
            let g = d_out[o];
            if g == 0.0 {
                continue;
            }
            grad[w2_off + n_out * h + o] += g;
            for j in 0..h {
                grad[w2_off + o * h + j] += g * hidden[j];
            }
        }
        // Hidden layer gradients through the tanh.
        for j in 0..h {
            let dpre = dh_scratch[j] * (1.0 - hidden[j] * hidden[j]);
            if dpre == 0.0 {
                continue;
            }
            grad[h * d_in + j] += dpre;
            match input {
                Input::OneHot(s) => grad[j * d_in + s] += dpre,
                Input::Dense(x) => {
                    for (wi, xi) in grad[j * d_in..(j + 1) * d_in].iter_mut().zip(x) {
                        *wi += dpre * xi;
                    }
                }
            }
        }
    }
}

fn orthogonal_matrix<R: Rng>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (tall_r, tall_c) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let a = DMatrix::from_fn(tall_r, tall_c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    // Fix the sign ambiguity so the distribution is uniform over the
    // orthogonal group.
    for j in 0..tall_c {
        if r[(j, j)] < 0.0 {
            for i in 0..tall_r {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let v = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
            out[i * cols + j] = gain * v;
        }
    }
    out
}

/// Numerically stable log-sum-exp; the single canonical path for turning
/// logits into log-probabilities, shared by sampling and loss code so
/// that identical parameters give bitwise-identical log-probs.
fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    max + sum.ln()
}

/// Borrowed view of one policy head; implemented by both the live
/// actor-critic and frozen snapshots.
#[derive(Clone, Copy)]
pub struct PolicyView<'a> {
    features: &'a Features,
    mlp: &'a Mlp,
}

impl<'a> PolicyView<'a> {
    pub fn num_actions(&self) -> usize {
        self.mlp.output_dim
    }

    pub fn logits_into(&self, state: usize, out: &mut Vec<f64>) {
        let mut hidden = Vec::new();
        self.mlp.forward(self.features.input(state), &mut hidden, out);
    }

    pub fn log_prob(&self, state: usize, action: usize) -> f64 {
        let mut logits = Vec::new();
        self.logits_into(state, &mut logits);
        logits[action] - log_sum_exp(&logits)
    }

    /// Log-probabilities of the given actions at the given states.
    pub fn logprobs(&self, states: &[usize], actions: &[usize]) -> Vec<f64> {
        assert_eq!(states.len(), actions.len());
        states.iter().zip(actions).map(|(&s, &a)| self.log_prob(s, a)).collect()
    }

    /// Evaluates the policy on every state and returns the exact
    /// per-state distributions.
    pub fn project_to_tabular(&self) -> TabularPolicy {
        let n = self.features.num_states();
        let na = self.num_actions();
        let mut probs = ndarray::Array2::zeros((n, na));
        let mut logits = Vec::new();
        for s in 0..n {
            self.logits_into(s, &mut logits);
            let lse = log_sum_exp(&logits);
            for a in 0..na {
                probs[[s, a]] = (logits[a] - lse).exp();
            }
        }
        TabularPolicy::new(probs).expect("softmax rows are distributions")
    }

    /// Shannon entropy of the action distribution at `state`.
    pub fn entropy(&self, state: usize) -> f64 {
        let mut logits = Vec::new();
        self.logits_into(state, &mut logits);
        let lse = log_sum_exp(&logits);
        -logits.iter().map(|&z| (z - lse) * (z - lse).exp()).sum::<f64>()
    }
}

impl BehaviorSampler for PolicyView<'_> {
    fn action_probs(&self, state: usize, buf: &mut Vec<f64>) {
        let mut logits = Vec::new();
        self.logits_into(state, &mut logits);
        let lse = log_sum_exp(&logits);
        buf.clear();
        buf.extend(logits.iter().map(|&z| (z - lse).exp()));
    }

    fn log_prob(&self, state: usize, action: usize) -> f64 {
        PolicyView::log_prob(self, state, action)
    }
}

/// Policy and value networks over a shared featurization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    features: Features,
    policy: Mlp,
    value: Mlp,
}

impl ActorCritic {
    /// Orthogonal initialization: sqrt(2) gain on hidden layers, a small
    /// 0.01 gain on the policy head (so the initial policy is near
    /// uniform) and unit gain on the value head. `hidden_width == 0`
    /// builds plain linear heads.
    pub fn new<R: Rng>(
        features: Features,
        num_actions: usize,
        hidden_width: usize,
        rng: &mut R,
    ) -> Self {
        let dim = features.dim();
        let gain = std::f64::consts::SQRT_2;
        let policy = Mlp::orthogonal(dim, hidden_width, num_actions, gain, 0.01, rng);
        let value = Mlp::orthogonal(dim, hidden_width, 1, gain, 1.0, rng);
        Self { features, policy, value }
    }

    pub fn features(&self) -> &Features {
        &self.features
    }

    pub fn num_actions(&self) -> usize {
        self.policy.output_dim
    }

    pub fn num_states(&self) -> usize {
        self.features.num_states()
    }

    pub fn policy_view(&self) -> PolicyView<'_> {
        PolicyView { features: &self.features, mlp: &self.policy }
    }

    /// Freezes the current policy parameters.
    pub fn snapshot(&self) -> Snapshot {
        Snapshot { features: self.features.clone(), policy: self.policy.clone() }
    }

    pub fn value(&self, state: usize) -> f64 {
        let (mut hidden, mut out) = (Vec::new(), Vec::new());
        self.value.forward(self.features.input(state), &mut hidden, &mut out);
        out[0]
    }

    pub fn values(&self, states: &[usize]) -> Vec<f64> {
        states.iter().map(|&s| self.value(s)).collect()
    }

    pub(crate) fn policy_net(&self) -> &Mlp {
        &self.policy
    }

    pub(crate) fn value_net(&self) -> &Mlp {
        &self.value
    }

    pub(crate) fn feature_input(&self, state: usize) -> Input<'_> {
        self.features.input(state)
    }

    pub fn policy_params(&self) -> &[f64] {
        self.policy.params()
    }

    pub fn value_params(&self) -> &[f64] {
        self.value.params()
    }

    pub fn policy_params_mut(&mut self) -> &mut [f64] {
        self.policy.params_mut()
    }

    pub fn value_params_mut(&mut self) -> &mut [f64] {
        self.value.params_mut()
    }

    pub fn set_policy_params(&mut self, params: &[f64]) {
        self.policy.set_params(params);
    }

    pub fn set_value_params(&mut self, params: &[f64]) {
        self.value.set_params(params);
    }

    /// Checkpoint with an explicit shape header and flat parameter
    /// vectors; round-trips bit-exactly.
    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialization cannot fail")
    }

    pub fn from_json_str(text: &str) -> Result<Self, String> {
        let ac: ActorCritic = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if !ac.policy.consistent() || !ac.value.consistent() {
            return Err("checkpoint shape header disagrees with parameter vector".into());
        }
        if ac.features.dim() != ac.policy.input_dim || ac.features.dim() != ac.value.input_dim {
            return Err("checkpoint features disagree with network input".into());
        }
        Ok(ac)
    }
}

/// An immutable copy of policy parameters frozen at some round.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    features: Features,
    policy: Mlp,
}

impl Snapshot {
    pub fn view(&self) -> PolicyView<'_> {
        PolicyView { features: &self.features, mlp: &self.policy }
    }

    pub fn params(&self) -> &[f64] {
        self.policy.params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_ac(seed: u64) -> ActorCritic {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ActorCritic::new(Features::OneHot { num_states: 6 }, 3, 8, &mut rng)
    }

    #[test]
    fn zeroed_output_layer_gives_the_uniform_policy() {
        let mut ac = small_ac(0);
        // Zero w2 and b2 of the policy head: logits vanish everywhere.
        let h = 8;
        let d_in = 6;
        let off = h * d_in + h;
        let mut params = ac.policy_params().to_vec();
        for p in params[off..].iter_mut() {
            *p = 0.0;
        }
        ac.set_policy_params(&params);
        let view = ac.policy_view();
        for s in 0..6 {
            for a in 0..3 {
                assert_eq!(view.log_prob(s, a), -(3.0f64.ln()));
            }
        }
        let tab = view.project_to_tabular();
        for s in 0..6 {
            for a in 0..3 {
                assert!((tab.prob(s, a) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        assert!((view.entropy(0) - 3.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn snapshots_are_immune_to_live_updates() {
        let mut ac = small_ac(1);
        let snap = ac.snapshot();
        let before: Vec<f64> = (0..6).map(|s| snap.view().log_prob(s, s % 3)).collect();
        let perturbed: Vec<f64> = ac.policy_params().iter().map(|p| p + 0.5).collect();
        ac.set_policy_params(&perturbed);
        let after: Vec<f64> = (0..6).map(|s| snap.view().log_prob(s, s % 3)).collect();
        assert_eq!(before, after);
        // And the live policy did change.
        assert_ne!(before[0], ac.policy_view().log_prob(0, 0));
    }

    #[test]
    fn random_nets_produce_normalized_distributions() {
        for seed in 0..5 {
            let ac = small_ac(seed);
            let view = ac.policy_view();
            for s in 0..6 {
                let total: f64 = (0..3).map(|a| view.log_prob(s, a).exp()).sum();
                assert!((total - 1.0).abs() <= 1e-10);
                assert!(view.entropy(s) >= 0.0);
            }
        }
    }

    #[test]
    fn initial_policy_is_near_uniform() {
        let ac = small_ac(7);
        let tab = ac.policy_view().project_to_tabular();
        for s in 0..6 {
            for a in 0..3 {
                assert!((tab.prob(s, a) - 1.0 / 3.0).abs() < 0.01);
            }
        }
    }

    #[test]
    fn orthogonal_init_has_orthonormal_rows_times_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = orthogonal_matrix(4, 9, 2.0, &mut rng);
        for i in 0..4 {
            for j in 0..4 {
                let dot: f64 = (0..9).map(|k| w[i * 9 + k] * w[j * 9 + k]).sum();
                let expect = if i == j { 4.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10, "row dot ({i},{j}) = {dot}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let ac = small_ac(9);
        let text = ac.to_json_string();
        let back = ActorCritic::from_json_str(&text).unwrap();
        assert_eq!(ac, back);
        assert!(ActorCritic::from_json_str("{\"bogus\":1}").is_err());
    }

    #[test]
    fn dense_features_agree_with_structure() {
        let layout = FourRoomsLayout::standard();
        let feats = Features::grid_xy(&layout);
        assert_eq!(feats.dim(), 2);
        assert_eq!(feats.num_states(), 104);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ac = ActorCritic::new(feats, 4, 16, &mut rng);
        let view = ac.policy_view();
        for s in [0, 50, 103] {
            let total: f64 = (0..4).map(|a| view.log_prob(s, a).exp()).sum();
            assert!((total - 1.0).abs() <= 1e-10);
        }
    }
}
