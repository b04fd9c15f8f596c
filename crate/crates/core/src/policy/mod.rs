//! Linear-softmax sequence policy over the joint text/audio vocabulary.
//!
//! The policy maps a [`State`] (task features plus a one-hot encoding of the
//! last `k` generated tokens) to logits through an affine map, and exposes
//! exact log-probabilities and their analytic gradients.

mod checkpoint;
mod vocab;

use std::ops::Deref;
use std::sync::Arc;

use rand::Rng;

use crate::env::TaskInstance;
use crate::error::{Error, Result};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use vocab::{Modality, TokenId, TokenInfo, VocabSpec, Vocabulary, AUDIO_TOKEN_SECONDS};

/// Default number of previous tokens the policy conditions on.
pub const DEFAULT_PREFIX_K: usize = 4;

/// Policy input at one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    task_features: Arc<[f64]>,
    /// Most recent token first; `None` pads positions before the sequence start.
    prefix: Vec<Option<TokenId>>,
    position: usize,
}

impl State {
    pub fn new(task_features: Arc<[f64]>, generated: &[TokenId], k: usize) -> Self {
        let prefix = (0..k)
            .map(|j| {
                generated
                    .len()
                    .checked_sub(j + 1)
                    .map(|i| generated[i])
            })
            .collect();
        Self {
            task_features,
            prefix,
            position: generated.len(),
        }
    }

    pub fn task_features(&self) -> &[f64] {
        &self.task_features
    }

    pub fn prefix(&self) -> &[Option<TokenId>] {
        &self.prefix
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn prefix_k(&self) -> usize {
        self.prefix.len()
    }

    /// Full feature dimension for a vocabulary of size `vocab_size`.
    pub fn feature_dim(&self, vocab_size: usize) -> usize {
        self.task_features.len() + self.prefix.len() * vocab_size
    }

    /// Dense feature vector; mostly useful for tests and finite differences.
    pub fn dense_features(&self, vocab_size: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.feature_dim(vocab_size)];
        self.for_each_active(vocab_size, |i, v| x[i] = v);
        x
    }

    /// Visits every feature that may be non-zero: all task features, then one
    /// index per non-padded prefix slot.
    fn for_each_active(&self, vocab_size: usize, mut f: impl FnMut(usize, f64)) {
        for (i, &v) in self.task_features.iter().enumerate() {
            f(i, v);
        }
        let base = self.task_features.len();
        for (slot, tok) in self.prefix.iter().enumerate() {
            if let Some(t) = tok {
                f(base + slot * vocab_size + t.index(), 1.0);
            }
        }
    }
}

/// Encodes `(task, prefix)` as a [`State`].
pub fn featurize(task: &TaskInstance, prefix: &[TokenId], k: usize) -> State {
    State::new(task.features(), prefix, k)
}

/// Weight matrix (feature × vocabulary, row-major) and bias.
///
/// The same shape doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab_size: usize,
    task_dim: usize,
    prefix_k: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl PolicyParams {
    /// All-zero parameters: the uniform policy.
    pub fn zeros(vocab_size: usize, task_dim: usize, prefix_k: usize) -> Self {
        let feature_dim = task_dim + prefix_k * vocab_size;
        Self {
            vocab_size,
            task_dim,
            prefix_k,
            weights: vec![0.0; feature_dim * vocab_size],
            bias: vec![0.0; vocab_size],
        }
    }

    pub fn from_parts(
        vocab_size: usize,
        task_dim: usize,
        prefix_k: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let p = Self::zeros(vocab_size, task_dim, prefix_k);
        if weights.len() != p.weights.len() {
            return Err(Error::Dimension(format!(
                "weight matrix has {} entries, expected {}",
                weights.len(),
                p.weights.len()
            )));
        }
        if bias.len() != vocab_size {
            return Err(Error::Dimension(format!(
                "bias has {} entries, expected {vocab_size}",
                bias.len()
            )));
        }
        Ok(Self {
            weights,
            bias,
            ..p
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.vocab_size, self.task_dim, self.prefix_k)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn task_dim(&self) -> usize {
        self.task_dim
    }

    pub fn prefix_k(&self) -> usize {
        self.prefix_k
    }

    pub fn feature_dim(&self) -> usize {
        self.task_dim + self.prefix_k * self.vocab_size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight(&self, feature: usize, token: usize) -> f64 {
        self.weights[feature * self.vocab_size + token]
    }

    pub fn weight_mut(&mut self, feature: usize, token: usize) -> &mut f64 {
        &mut self.weights[feature * self.vocab_size + token]
    }

    pub fn bias_mut(&mut self, token: usize) -> &mut f64 {
        &mut self.bias[token]
    }

    /// Number of scalar parameters.
    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat view: weights followed by bias.
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().chain(self.bias.iter()).copied()
    }

    pub fn get_flat(&self, i: usize) -> f64 {
        if i < self.weights.len() {
            self.weights[i]
        } else {
            self.bias[i - self.weights.len()]
        }
    }

    pub fn set_flat(&mut self, i: usize, v: f64) {
        if i < self.weights.len() {
            self.weights[i] = v;
        } else {
            let j = i - self.weights.len();
            self.bias[j] = v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &PolicyParams) {
        debug_assert_eq!(self.weights.len(), other.weights.len());
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += alpha * b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            *v *= alpha;
        }
    }

    fn check_state(&self, state: &State) -> Result<()> {
        if state.task_features.len() != self.task_dim || state.prefix.len() != self.prefix_k {
            return Err(Error::Dimension(format!(
                "state has {} task features and k={}, params expect {} and k={}",
                state.task_features.len(),
                state.prefix.len(),
                self.task_dim,
                self.prefix_k
            )));
        }
        if let Some(t) = state.prefix.iter().flatten().find(|t| t.index() >= self.vocab_size) {
            return Err(Error::Dimension(format!(
                "prefix token {t} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Logits `bias + Wᵀx`.
    pub fn logits(&self, state: &State) -> Result<Vec<f64>> {
        self.check_state(state)?;
        let v = self.vocab_size;
        let mut z = self.bias.clone();
        state.for_each_active(v, |i, x| {
            if x != 0.0 {
                let row = &self.weights[i * v..(i + 1) * v];
                for (zj, wj) in z.iter_mut().zip(row) {
                    *zj += x * wj;
                }
            }
        });
        Ok(z)
    }

    pub fn action_distribution(&self, state: &State) -> Result<ActionDistribution> {
        Ok(ActionDistribution::from_logits(&self.logits(state)?))
    }

    pub fn log_prob(&self, state: &State, action: TokenId) -> Result<f64> {
        self.check_action(action)?;
        Ok(self.action_distribution(state)?.log_prob(action))
    }

    fn check_action(&self, action: TokenId) -> Result<()> {
        if action.index() >= self.vocab_size {
            return Err(Error::Dimension(format!(
                "action {action} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// ∇θ log π(action | state), same shape as the parameters.
    pub fn grad_log_prob(&self, state: &State, action: TokenId) -> Result<PolicyParams> {
        let mut g = self.zeros_like();
        self.accumulate_grad_log_prob(state, action, 1.0, &mut g)?;
        Ok(g)
    }

    /// `out += scale · ∇θ log π(action | state)`, touching only active rows.
    pub fn accumulate_grad_log_prob(
        &self,
        state: &State,
        action: TokenId,
        scale: f64,
        out: &mut PolicyParams,
    ) -> Result<()> {
        self.check_action(action)?;
        let dist = self.action_distribution(state)?;
        let v = self.vocab_size;
        // d log p_a / d z_j = 1[j = a] - p_j
        let mut dz: Vec<f64> = dist.log_probs.iter().map(|lp| -lp.exp()).collect();
        dz[action.index()] += 1.0;
        for (b, d) in out.bias.iter_mut().zip(&dz) {
            *b += scale * d;
        }
        state.for_each_active(v, |i, x| {
            if x != 0.0 {
                let row = &mut out.weights[i * v..(i + 1) * v];
                for (w, d) in row.iter_mut().zip(&dz) {
                    *w += scale * x * d;
                }
            }
        });
        Ok(())
    }
}

/// Log-probabilities over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    log_probs: Vec<f64>,
}

impl ActionDistribution {
    /// Stabilized log-softmax.
    pub fn from_logits(logits: &[f64]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        Self {
            log_probs: logits.iter().map(|z| z - lse).collect(),
        }
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn log_prob(&self, action: TokenId) -> f64 {
        self.log_probs[action.index()]
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|lp| lp.exp()).collect()
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    /// Highest-probability token; ties go to the lowest id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &lp) in self.log_probs.iter().enumerate() {
            if lp > self.log_probs[best] {
                best = i;
            }
        }
        TokenId(best as u32)
    }

    /// Exact categorical KL(self ‖ other).
    pub fn kl(&self, other: &ActionDistribution) -> f64 {
        self.log_probs
            .iter()
            .zip(&other.log_probs)
            .map(|(p, q)| p.exp() * (p - q))
            .sum()
    }
}

/// Inverse-CDF categorical draw.
pub fn sample_action<R: Rng + ?Sized>(dist: &ActionDistribution, rng: &mut R) -> TokenId {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, lp) in dist.log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc {
            return TokenId(i as u32);
        }
    }
    TokenId(last_positive as u32)
}

/// Immutable deep copy of a parameter set (the reference policy).
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenPolicy(Arc<PolicyParams>);

impl Deref for FrozenPolicy {
    type Target = PolicyParams;

    fn deref(&self) -> &PolicyParams {
        &self.0
    }
}

pub fn snapshot(params: &PolicyParams) -> FrozenPolicy {
    FrozenPolicy(Arc::new(params.clone()))
}
