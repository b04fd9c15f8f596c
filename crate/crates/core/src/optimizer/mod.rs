//! REINFORCE++ policy optimization.
//!
//! Per token `t` of a trajectory with terminal reward `R`:
//!
//! ```text
//! KL(i)  = log π_θ(a_i|s_i) − log π_ref(a_i|s_i)
//! A_t    = R − β · Σ_{i=t..T} KL(i)
//! Â_t    = (A_t − μ_A) / max(σ_A, σ_floor)        over every token of the batch
//! r_t    = π_θ(a_t|s_t) / π_θold(a_t|s_t)
//! J(θ)   = mean_t min(r_t Â_t, clip(r_t, 1−ε, 1+ε) Â_t)
//! ```
//!
//! There is no critic. `update_step` ascends `J` with plain gradient steps.

mod trainer;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, State, TokenId};

pub use trainer::{
    evaluate_greedy, evaluate_rewards, splitmix64, stream_seed, train, GreedyEval, StepLog, TrainConfig,
    TrainOutcome,
};

/// One rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    task_id: String,
    states: Vec<State>,
    actions: Vec<TokenId>,
    logp_old: Vec<f64>,
    logp_ref: Vec<f64>,
    terminal_reward: f64,
}

impl Trajectory {
    pub fn new(
        task_id: String,
        states: Vec<State>,
        actions: Vec<TokenId>,
        logp_old: Vec<f64>,
        logp_ref: Vec<f64>,
        terminal_reward: f64,
    ) -> Result<Self> {
        let t = actions.len();
        if t == 0 {
            return Err(Error::Empty("trajectory has no tokens"));
        }
        for (what, len) in [
            ("states", states.len()),
            ("logp_old", logp_old.len()),
            ("logp_ref", logp_ref.len()),
        ] {
            if len != t {
                return Err(Error::LengthMismatch {
                    what,
                    expected: t,
                    got: len,
                });
            }
        }
        if let Some(lp) = logp_old
            .iter()
            .chain(&logp_ref)
            .find(|lp| !lp.is_finite() || **lp > 0.0)
        {
            return Err(Error::config(format!(
                "log-probabilities must be finite and <= 0, found {lp}"
            )));
        }
        if !terminal_reward.is_finite() {
            return Err(Error::config("terminal reward must be finite"));
        }
        Ok(Self {
            task_id,
            states,
            actions,
            logp_old,
            logp_ref,
            terminal_reward,
        })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn actions(&self) -> &[TokenId] {
        &self.actions
    }

    pub fn logp_old(&self) -> &[f64] {
        &self.logp_old
    }

    pub fn logp_ref(&self) -> &[f64] {
        &self.logp_ref
    }

    pub fn terminal_reward(&self) -> f64 {
        self.terminal_reward
    }

    /// Number of tokens T.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Current-policy log-probabilities of the taken actions.
    pub fn logp_under(&self, params: &PolicyParams) -> Result<Vec<f64>> {
        self.states
            .iter()
            .zip(&self.actions)
            .map(|(s, &a)| params.log_prob(s, a))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageStats {
    pub mu: f64,
    pub sigma: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateConfig {
    pub learning_rate: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub sigma_floor: f64,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            beta: 0.01,
            epsilon: 0.2,
            batch_size: 64,
            epochs: 1,
            sigma_floor: 1e-8,
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::config("sigma_floor must be > 0"));
        }
        Ok(())
    }
}

/// Single-sample KL estimate at the taken token.
pub fn token_kl(logp_cur: f64, logp_ref: f64) -> f64 {
    logp_cur - logp_ref
}

/// `A_t = R − β Σ_{i≥t} KL(i)`, one backward pass.
pub fn raw_advantages(traj: &Trajectory, logp_cur: &[f64], beta: f64) -> Result<Vec<f64>> {
    if logp_cur.len() != traj.len() {
        return Err(Error::LengthMismatch {
            what: "logp_cur",
            expected: traj.len(),
            got: logp_cur.len(),
        });
    }
    let mut out = vec![0.0; traj.len()];
    let mut suffix = 0.0;
    for t in (0..traj.len()).rev() {
        suffix += token_kl(logp_cur[t], traj.logp_ref[t]);
        out[t] = traj.terminal_reward - beta * suffix;
    }
    Ok(out)
}

/// Batch (population) normalization with a floor on the standard deviation.
pub fn normalize_advantages(values: &[f64], sigma_floor: f64) -> Result<(Vec<f64>, AdvantageStats)> {
    if values.is_empty() {
        return Err(Error::Empty("advantage batch is empty"));
    }
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sigma = var.sqrt();
    let denom = sigma.max(sigma_floor);
    let normalized = values.iter().map(|v| (v - mu) / denom).collect();
    Ok((
        normalized,
        AdvantageStats {
            mu,
            sigma,
            count: values.len(),
        },
    ))
}

pub fn importance_ratio(logp_cur: f64, logp_old: f64) -> f64 {
    (logp_cur - logp_old).exp()
}

/// `min(r·A, clip(r, 1−ε, 1+ε)·A)`.
pub fn clipped_token_objective(ratio: f64, adv: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * adv).min(clipped * adv)
}

/// True when the clipped (θ-independent) branch is strictly smaller.
pub fn clip_active(ratio: f64, adv: f64, epsilon: f64) -> bool {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    clipped * adv < ratio * adv
}

/// Adds `Σ_t ∇θ min(r_t Â_t, clip(r_t) Â_t)` for one trajectory to `out` and
/// returns the number of tokens on the clipped branch.
pub fn accumulate_trajectory_gradient(
    params: &PolicyParams,
    traj: &Trajectory,
    advantages: &[f64],
    epsilon: f64,
    out: &mut PolicyParams,
) -> Result<usize> {
    if advantages.len() != traj.len() {
        return Err(Error::LengthMismatch {
            what: "advantages",
            expected: traj.len(),
            got: advantages.len(),
        });
    }
    let mut clipped = 0;
    for t in 0..traj.len() {
        let adv = advantages[t];
        let lp = params.log_prob(&traj.states[t], traj.actions[t])?;
        let ratio = importance_ratio(lp, traj.logp_old[t]);
        if clip_active(ratio, adv, epsilon) {
            clipped += 1;
            continue;
        }
        // ∇(r·A) = A·r·∇log π
        let scale = adv * ratio;
        if scale != 0.0 {
            params.accumulate_grad_log_prob(&traj.states[t], traj.actions[t], scale, out)?;
        }
    }
    Ok(clipped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateDiagnostics {
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub advantage: AdvantageStats,
    /// Norm of the first epoch's gradient (taken at the behaviour policy).
    pub grad_norm: f64,
    pub tokens: usize,
}

/// Raw then normalized advantages for a batch, using `params` as the current policy.
pub fn batch_advantages(
    params: &PolicyParams,
    batch: &[Trajectory],
    cfg: &UpdateConfig,
) -> Result<(Vec<Vec<f64>>, AdvantageStats, f64)> {
    let per_traj: Vec<(Vec<f64>, f64)> = batch
        .par_iter()
        .map(|traj| {
            let lp = traj.logp_under(params)?;
            let kl_sum: f64 = lp
                .iter()
                .zip(&traj.logp_ref)
                .map(|(c, r)| token_kl(*c, *r))
                .sum();
            Ok((raw_advantages(traj, &lp, cfg.beta)?, kl_sum))
        })
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = per_traj.iter().flat_map(|(a, _)| a.iter().copied()).collect();
    let kl_total: f64 = per_traj.iter().map(|(_, k)| k).sum();
    let mean_kl = kl_total / flat.len().max(1) as f64;
    let (normalized, stats) = normalize_advantages(&flat, cfg.sigma_floor)?;
    let mut split = Vec::with_capacity(batch.len());
    let mut offset = 0;
    for traj in batch {
        split.push(normalized[offset..offset + traj.len()].to_vec());
        offset += traj.len();
    }
    Ok((split, stats, mean_kl))
}

/// Gradient of the mean clipped token objective. Per-trajectory terms are
/// computed in parallel and reduced in batch order.
pub fn surrogate_gradient(
    params: &PolicyParams,
    batch: &[Trajectory],
    advantages: &[Vec<f64>],
    epsilon: f64,
) -> Result<(PolicyParams, usize)> {
    let parts: Vec<(PolicyParams, usize)> = batch
        .par_iter()
        .zip(advantages.par_iter())
        .map(|(traj, adv)| {
            let mut g = params.zeros_like();
            let clipped = accumulate_trajectory_gradient(params, traj, adv, epsilon, &mut g)?;
            Ok((g, clipped))
        })
        .collect::<Result<_>>()?;
    let tokens: usize = batch.iter().map(Trajectory::len).sum();
    let mut grad = params.zeros_like();
    let mut clipped = 0;
    for (i, (g, c)) in parts.iter().enumerate() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                trajectory: i,
                task_id: batch[i].task_id.clone(),
            });
        }
        grad.add_scaled(1.0, g);
        clipped += c;
    }
    grad.scale(1.0 / tokens as f64);
    Ok((grad, clipped))
}

/// One REINFORCE++ update: advantages are formed once from the policy at the
/// start of the step and held fixed; each epoch recomputes ratios and takes
/// one ascent step on the mean clipped objective.
pub fn update_step(
    params: &PolicyParams,
    batch: &[Trajectory],
    cfg: &UpdateConfig,
) -> Result<(PolicyParams, UpdateDiagnostics)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(Error::Empty("update batch has no trajectories"));
    }
    let (advantages, stats, mean_kl) = batch_advantages(params, batch, cfg)?;
    let tokens: usize = batch.iter().map(Trajectory::len).sum();
    let mean_reward =
        batch.iter().map(|t| t.terminal_reward).sum::<f64>() / batch.len() as f64;

    let mut current = params.clone();
    let mut grad_norm = 0.0;
    let mut clipped_total = 0;
    for epoch in 0..cfg.epochs {
        let (grad, clipped) = surrogate_gradient(&current, batch, &advantages, cfg.epsilon)?;
        if epoch == 0 {
            grad_norm = grad.norm();
        }
        clipped_total += clipped;
        current.add_scaled(cfg.learning_rate, &grad);
    }
    Ok((
        current,
        UpdateDiagnostics {
            mean_reward,
            mean_kl,
            clip_fraction: clipped_total as f64 / (tokens * cfg.epochs) as f64,
            advantage: stats,
            grad_norm,
            tokens,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{snapshot, State};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn traj_with(reward: f64, logp_ref: Vec<f64>) -> Trajectory {
        let t = logp_ref.len();
        let states = (0..t).map(|_| State::new(vec![0.0].into(), &[], 1)).collect();
        Trajectory::new(
            "x".into(),
            states,
            vec![TokenId(0); t],
            vec![-1.0; t],
            logp_ref,
            reward,
        )
        .unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(token_kl(-0.7, -0.7), 0.0);
        assert_eq!(token_kl(-1.0, -2.0), 1.0);
    }

    #[test]
    fn raw_advantage_examples() {
        // logp_cur − logp_ref = (0.1, 0.2, 0.3)
        let traj = traj_with(4.0, vec![-1.1, -1.2, -1.3]);
        let a = raw_advantages(&traj, &[-1.0, -1.0, -1.0], 1.0).unwrap();
        for (got, want) in a.iter().zip([3.4, 3.5, 3.7]) {
            assert!((got - want).abs() < 1e-12);
        }
        let a0 = raw_advantages(&traj, &[-1.0, -1.0, -1.0], 0.0).unwrap();
        assert_eq!(a0, vec![4.0; 3]);
        let same = raw_advantages(&traj, &[-1.1, -1.2, -1.3], 0.5).unwrap();
        assert_eq!(same, vec![4.0; 3]);
        assert!(matches!(
            raw_advantages(&traj, &[-1.0], 1.0),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn normalization_examples() {
        let (n, s) = normalize_advantages(&[1.0, 2.0, 3.0], 1e-8).unwrap();
        for (got, want) in n.iter().zip([-1.2247, 0.0, 1.2247]) {
            assert!((got - want).abs() < 1e-4);
        }
        assert!((s.sigma - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let (n, _) = normalize_advantages(&[5.0; 7], 1e-8).unwrap();
        assert_eq!(n, vec![0.0; 7]);
        let (n, _) = normalize_advantages(&[3.5], 1e-8).unwrap();
        assert_eq!(n, vec![0.0]);
        assert!(normalize_advantages(&[], 1e-8).is_err());
    }

    #[test]
    fn ratio_and_clip_examples() {
        assert_eq!(importance_ratio(-0.3, -0.3), 1.0);
        assert!((importance_ratio(2f64.ln() - 1.0, -1.0) - 2.0).abs() < 1e-15);
        assert!((clipped_token_objective(1.5, 2.0, 0.2) - 2.4).abs() < 1e-15);
        assert_eq!(clipped_token_objective(1.0, -3.5, 0.2), -3.5);
        assert!((clipped_token_objective(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
        assert!(clip_active(1.5, 2.0, 0.2));
        assert!(!clip_active(1.1, 2.0, 0.2));
        assert!(!clip_active(1.5, -2.0, 0.2));
    }

    #[test]
    fn zero_advantages_leave_params_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = PolicyParams::zeros(3, 2, 1);
        for i in 0..p.len() {
            p.set_flat(i, rng.gen_range(-1.0..1.0));
        }
        // identical rewards and no KL penalty: every advantage is zero
        let mut batch = Vec::new();
        for _ in 0..5 {
            let s = State::new(vec![rng.gen(), rng.gen()].into(), &[], 1);
            let a = TokenId(rng.gen_range(0..3));
            let lp = p.log_prob(&s, a).unwrap();
            batch.push(
                Trajectory::new("t".into(), vec![s], vec![a], vec![lp], vec![lp], 1.5).unwrap(),
            );
        }
        let cfg = UpdateConfig {
            beta: 0.0,
            ..Default::default()
        };
        let (new, diag) = update_step(&p, &batch, &cfg).unwrap();
        assert_eq!(new, p);
        assert_eq!(diag.clip_fraction, 0.0);
        assert_eq!(diag.grad_norm, 0.0);
    }

    #[test]
    fn self_consistency_at_sampling_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = PolicyParams::zeros(4, 3, 2);
        for i in 0..p.len() {
            p.set_flat(i, rng.gen_range(-1.0..1.0));
        }
        let frozen = snapshot(&PolicyParams::zeros(4, 3, 2));
        let mut batch = Vec::new();
        for j in 0..6 {
            let feats: std::sync::Arc<[f64]> = vec![rng.gen(), rng.gen(), rng.gen()].into();
            let mut toks = Vec::new();
            let (mut st, mut lo, mut lr) = (vec![], vec![], vec![]);
            for _ in 0..3 {
                let s = State::new(feats.clone(), &toks, 2);
                let a = TokenId(rng.gen_range(0..4));
                lo.push(p.log_prob(&s, a).unwrap());
                lr.push(frozen.log_prob(&s, a).unwrap());
                st.push(s);
                toks.push(a);
            }
            batch.push(Trajectory::new(format!("{j}"), st, toks, lo, lr, j as f64).unwrap());
        }
        let cfg = UpdateConfig::default();
        let (adv, _, _) = batch_advantages(&p, &batch, &cfg).unwrap();
        let mut objective = 0.0;
        let mut n = 0;
        for (traj, a) in batch.iter().zip(&adv) {
            let lp = traj.logp_under(&p).unwrap();
            for t in 0..traj.len() {
                let r = importance_ratio(lp[t], traj.logp_old()[t]);
                assert_eq!(r, 1.0);
                objective += clipped_token_objective(r, a[t], cfg.epsilon);
                n += 1;
            }
        }
        let mean_adv = adv.iter().flatten().sum::<f64>() / n as f64;
        assert!((objective / n as f64 - mean_adv).abs() < 1e-12);
        let (_, diag) = update_step(&p, &batch, &cfg).unwrap();
        assert_eq!(diag.clip_fraction, 0.0);
    }

    #[test]
    fn non_finite_gradient_names_trajectory() {
        let p = PolicyParams::zeros(2, 1, 1);
        let s = State::new(vec![f64::INFINITY].into(), &[], 1);
        let ok = State::new(vec![1.0].into(), &[], 1);
        let good = Trajectory::new("good".into(), vec![ok], vec![TokenId(0)], vec![-0.5], vec![-0.5], 1.0).unwrap();
        let bad = Trajectory::new("bad".into(), vec![s], vec![TokenId(0)], vec![-0.5], vec![-0.5], 0.0).unwrap();
        let adv = vec![vec![1.0], vec![1.0]];
        match surrogate_gradient(&p, &[good, bad], &adv, 0.2) {
            Err(Error::NonFiniteGradient { trajectory, task_id }) => {
                assert_eq!(trajectory, 1);
                assert_eq!(task_id, "bad");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn trajectory_validation() {
        let s = State::new(vec![0.0].into(), &[], 1);
        assert!(Trajectory::new("e".into(), vec![], vec![], vec![], vec![], 0.0).is_err());
        assert!(Trajectory::new("p".into(), vec![s.clone()], vec![TokenId(0)], vec![0.5], vec![-1.0], 0.0).is_err());
        assert!(Trajectory::new("m".into(), vec![s], vec![TokenId(0)], vec![-0.5, -0.5], vec![-1.0], 0.0).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(UpdateConfig::default().validate().is_ok());
        for bad in [
            UpdateConfig { learning_rate: 0.0, ..Default::default() },
            UpdateConfig { epochs: 0, ..Default::default() },
            UpdateConfig { sigma_floor: 0.0, ..Default::default() },
            UpdateConfig { epsilon: -1.0, ..Default::default() },
            UpdateConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        let no_clip = UpdateConfig { epsilon: f64::INFINITY, ..Default::default() };
        assert!(no_clip.validate().is_ok());
        assert_eq!(clipped_token_objective(50.0, 2.0, f64::INFINITY), 100.0);
    }
}
