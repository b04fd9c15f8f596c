use std::collections::VecDeque;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{update_step, Trajectory, UpdateConfig};
use crate::env::{Env, EnvConfig, TaskConfig, TaskGenerator, TaskInstance};
use crate::error::Result;
use crate::metrics::accuracy;
use crate::policy::{snapshot, FrozenPolicy, PolicyParams};

/// SplitMix64 finalizer; used to derive independent stream seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream ^ splitmix64(index)))
}

const TRAIN_TASKS: u64 = 1;
const ROLLOUTS: u64 = 2;
const EVAL_TASKS: u64 = 3;
const EVAL_ROLLOUTS: u64 = 4;
const HELDOUT_TASKS: u64 = 5;
const HELDOUT_DECODE: u64 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: TaskConfig,
    pub env: EnvConfig,
    pub update: UpdateConfig,
    pub steps: usize,
    pub seed: u64,
    /// Rollouts used for the before/after reward comparison.
    pub eval_rollouts: usize,
    /// Held-out tasks for greedy accuracy.
    pub heldout: usize,
    /// Record wall-clock seconds in the step log (makes logs non-reproducible).
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: TaskConfig::default(),
            env: EnvConfig::default(),
            update: UpdateConfig {
                learning_rate: 3.0,
                batch_size: 256,
                ..UpdateConfig::default()
            },
            steps: 200,
            seed: 7,
            eval_rollouts: 1024,
            heldout: 512,
            record_wall_time: false,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub adv_mean: f64,
    pub adv_std: f64,
    pub grad_norm: f64,
    /// Mean reward over the most recent (up to) 1,024 training rollouts.
    pub reward_ma: f64,
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreedyEval {
    /// Accuracy with answer forcing when the generation has no answer.
    pub accuracy: f64,
    /// Accuracy of the free generation alone; missing answers count as wrong.
    pub strict_accuracy: f64,
    /// Fraction of generations with an extractable answer in the active modality.
    pub format_rate: f64,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub reference: FrozenPolicy,
    pub logs: Vec<StepLog>,
    /// Mean composite reward of the initial policy over the evaluation rollouts.
    pub initial_reward: f64,
    /// Same evaluation tasks and seeds, final policy.
    pub final_reward: f64,
    pub initial_heldout: GreedyEval,
    pub heldout: GreedyEval,
}

/// One sampled rollout per task; rewards in task order.
pub fn evaluate_rewards(
    env: &Env,
    params: &PolicyParams,
    reference: &PolicyParams,
    tasks: &[TaskInstance],
    seed: u64,
) -> Result<Vec<f64>> {
    tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, EVAL_ROLLOUTS, i as u64));
            env.run_episode(params, reference, task, &mut rng).map(|r| r.reward)
        })
        .collect()
}

pub fn evaluate_greedy(
    env: &Env,
    params: &PolicyParams,
    tasks: &[TaskInstance],
    seed: u64,
) -> Result<GreedyEval> {
    let outcomes = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, HELDOUT_DECODE, i as u64));
            env.decode_greedy(params, task, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let truths: Vec<_> = tasks.iter().map(|t| t.task.label).collect();
    let forced: Vec<_> = outcomes.iter().map(|o| Some(o.forced)).collect();
    let strict: Vec<_> = outcomes.iter().map(|o| o.prediction).collect();
    let formatted = strict.iter().filter(|p| p.is_some()).count();
    Ok(GreedyEval {
        accuracy: accuracy(&forced, &truths)?,
        strict_accuracy: accuracy(&strict, &truths)?,
        format_rate: formatted as f64 / tasks.len() as f64,
        n: tasks.len(),
    })
}

fn tasks_from_stream(config: TaskConfig, n: usize, seed: u64) -> Result<Vec<TaskInstance>> {
    let mut gen = TaskGenerator::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| gen.generate(&mut rng)).collect()
}

/// Runs the full loop: baseline evaluation, `steps` updates, final evaluation.
/// `on_step` sees every log record as it is produced.
pub fn train(
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.update.validate()?;
    let env = Env::new(cfg.env.clone())?;
    let mut params = env.initial_params();
    let reference = snapshot(&params);

    let eval_tasks = tasks_from_stream(
        cfg.task,
        cfg.eval_rollouts,
        stream_seed(cfg.seed, EVAL_TASKS, 0),
    )?;
    let heldout_tasks =
        tasks_from_stream(cfg.task, cfg.heldout, stream_seed(cfg.seed, HELDOUT_TASKS, 0))?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let initial_reward = mean(&evaluate_rewards(&env, &params, &reference, &eval_tasks, cfg.seed)?);
    let initial_heldout = evaluate_greedy(&env, &params, &heldout_tasks, cfg.seed)?;

    let mut generator = TaskGenerator::new(cfg.task)?;
    let mut task_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, TRAIN_TASKS, 0));
    let mut window: VecDeque<f64> = VecDeque::with_capacity(1024);
    let mut logs = Vec::with_capacity(cfg.steps);
    let started = Instant::now();

    for step in 0..cfg.steps {
        let tasks = (0..cfg.update.batch_size)
            .map(|_| generator.generate(&mut task_rng))
            .collect::<Result<Vec<_>>>()?;
        let batch: Vec<Trajectory> = tasks
            .par_iter()
            .enumerate()
            .map(|(i, task)| {
                let idx = (step * cfg.update.batch_size + i) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, ROLLOUTS, idx));
                env.run_episode(&params, &reference, task, &mut rng)
                    .map(|r| r.trajectory)
            })
            .collect::<Result<_>>()?;
        for t in &batch {
            if window.len() == 1024 {
                window.pop_front();
            }
            window.push_back(t.terminal_reward());
        }

        let (next, diag) = update_step(&params, &batch, &cfg.update)?;
        params = next;
        let log = StepLog {
            step: step + 1,
            mean_reward: diag.mean_reward,
            mean_kl: diag.mean_kl,
            clip_fraction: diag.clip_fraction,
            adv_mean: diag.advantage.mu,
            adv_std: diag.advantage.sigma,
            grad_norm: diag.grad_norm,
            reward_ma: window.iter().sum::<f64>() / window.len() as f64,
            wall_time_s: cfg
                .record_wall_time
                .then(|| started.elapsed().as_secs_f64()),
        };
        on_step(&log)?;
        logs.push(log);
    }

    let final_reward = mean(&evaluate_rewards(&env, &params, &reference, &eval_tasks, cfg.seed)?);
    let heldout = evaluate_greedy(&env, &params, &heldout_tasks, cfg.seed)?;
    Ok(TrainOutcome {
        params,
        reference,
        logs,
        initial_reward,
        final_reward,
        initial_heldout,
        heldout,
    })
}
