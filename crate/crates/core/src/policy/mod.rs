//! Per-pixel advantage actor-critic: trajectories, returns, losses with
//! analytic gradients, a synchronous multi-worker trainer and inference.

mod checkpoint;
mod gradcheck;
mod net;

use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::env::{EnvConfig, Episode, Observation, StepRecord};
use crate::error::{Error, Result};
use crate::grid::{decode_instances, remove_small_segments, ActionMap, ColorState, Image, LabelMap};
use crate::metrics::{arand, sbd};
use crate::reward::RewardMap;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointHeader,
    CHECKPOINT_FORMAT_VERSION,
};
pub use gradcheck::{gradient_check, synthetic_trajectory, GradCheckConfig, GradCheckReport};
pub use net::{forward, Activation, ConvLayerSpec, NetSpec, PolicyOutput, PolicyParams};

use net::{backward, forward_cached, ForwardCache};

/// One environment transition as seen by the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    /// Observation before the action.
    pub observation: Observation,
    pub action: ActionMap,
    /// Log-probability of the taken action per pixel.
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub reward: RewardMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub max_steps: usize,
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn is_complete(&self) -> bool {
        self.steps.len() == self.max_steps
    }

    fn pixels(&self) -> usize {
        self.steps.first().map_or(0, |s| s.observation.height * s.observation.width)
    }

    fn validate(&self) -> Result<()> {
        if !self.is_complete() {
            return Err(Error::InvalidParameter(format!(
                "incomplete trajectory: {} of {} steps",
                self.steps.len(),
                self.max_steps
            )));
        }
        let n = self.pixels();
        for (t, s) in self.steps.iter().enumerate() {
            let ok = s.observation.height * s.observation.width == n
                && s.action.bits().len() == n
                && s.log_probs.len() == n
                && s.values.len() == n
                && s.reward.total.len() == n;
            if !ok {
                return Err(Error::ShapeMismatch(format!("trajectory step {t} has inconsistent shapes")));
            }
        }
        Ok(())
    }
}

/// Discounted returns and advantages, indexed `[step][pixel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsMap {
    pub returns: Vec<Vec<f64>>,
    pub advantages: Vec<Vec<f64>>,
}

/// Monte-Carlo returns within the episode; advantages use the recorded values.
pub fn compute_returns(traj: &Trajectory, gamma: f64) -> Result<ReturnsMap> {
    traj.validate()?;
    let n = traj.pixels();
    let mut returns = vec![vec![0.0; n]; traj.max_steps];
    let mut acc = vec![0.0; n];
    for t in (0..traj.max_steps).rev() {
        for (a, &r) in acc.iter_mut().zip(&traj.steps[t].reward.total) {
            *a = r + gamma * *a;
        }
        returns[t].copy_from_slice(&acc);
    }
    let advantages = returns
        .iter()
        .zip(&traj.steps)
        .map(|(r, s)| r.iter().zip(&s.values).map(|(r, v)| r - v).collect())
        .collect();
    Ok(ReturnsMap { returns, advantages })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub entropy_beta: f64,
    pub value_coef: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            entropy_beta: 0.01,
            value_coef: 0.5,
        }
    }
}

/// Loss values averaged over pixels and steps. `total` is the optimized
/// objective `policy + value_coef * value - entropy_beta * entropy`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
}

impl Losses {
    fn is_finite(&self) -> bool {
        self.policy.is_finite() && self.value.is_finite() && self.entropy.is_finite() && self.total.is_finite()
    }
}

/// Loss (and optionally gradient) given forward passes for every step.
/// Advantages come from `frozen` when given, otherwise from the fresh values.
pub(crate) fn objective(
    params: &PolicyParams,
    traj: &Trajectory,
    forwards: &[(PolicyOutput, ForwardCache)],
    returns: &[Vec<f64>],
    frozen: Option<&[Vec<f64>]>,
    loss: LossConfig,
    want_grad: bool,
) -> (Losses, Option<Vec<f64>>) {
    let n = traj.pixels();
    let norm = 1.0 / (n * traj.max_steps).max(1) as f64;
    let mut out = Losses::default();
    let mut grad = want_grad.then(|| vec![0.0; params.len()]);
    let mut d_logits = vec![[0.0; 2]; n];
    let mut d_values = vec![0.0; n];
    for (t, (step, (fw, cache))) in traj.steps.iter().zip(forwards).enumerate() {
        let bits = step.action.bits();
        for p in 0..n {
            let lp = fw.log_probs[p];
            let pr = [lp[0].exp(), lp[1].exp()];
            let a = usize::from(bits[p]);
            let r = returns[t][p];
            let v = fw.values[p];
            let adv = frozen.map_or(r - v, |f| f[t][p]);
            let h = -(pr[0] * lp[0] + pr[1] * lp[1]);
            out.policy += -adv * lp[a] * norm;
            out.value += (r - v) * (r - v) * norm;
            out.entropy += h * norm;
            if want_grad {
                for k in 0..2 {
                    let onehot = if k == a { 1.0 } else { 0.0 };
                    d_logits[p][k] = (-adv * (onehot - pr[k]) + loss.entropy_beta * pr[k] * (lp[k] + h)) * norm;
                }
                d_values[p] = -2.0 * loss.value_coef * (r - v) * norm;
            }
        }
        if let Some(g) = grad.as_mut() {
            backward(params, cache, &d_logits, &d_values, g);
        }
    }
    out.total = out.policy + loss.value_coef * out.value - loss.entropy_beta * out.entropy;
    (out, grad)
}

fn forward_all(params: &PolicyParams, traj: &Trajectory) -> Result<Vec<(PolicyOutput, ForwardCache)>> {
    traj.steps.iter().map(|s| forward_cached(params, &s.observation)).collect()
}

/// Losses and their full analytic gradient. The advantage is treated as a
/// constant in the policy term.
pub fn losses_and_gradients(
    params: &PolicyParams,
    traj: &Trajectory,
    gamma: f64,
    loss: LossConfig,
) -> Result<(Losses, Vec<f64>)> {
    let ret = compute_returns(traj, gamma)?;
    let forwards = forward_all(params, traj)?;
    let (losses, grad) = objective(params, traj, &forwards, &ret.returns, None, loss, true);
    let grad = grad.expect("gradient requested");
    finite_or(&losses, &grad)?;
    Ok((losses, grad))
}

fn finite_or(losses: &Losses, grad: &[f64]) -> Result<()> {
    if !losses.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Gradient descent with heavy-ball momentum.
    Momentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Momentum,
            learning_rate: 1e-3,
            momentum: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            grad_clip: 5.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.grad_clip >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter("optimizer settings out of range".into()))
        }
    }
}

/// Optimizer state; moments start at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, len: usize) -> Self {
        Self {
            cfg,
            first: vec![0.0; len],
            second: vec![0.0; len],
            steps: 0,
        }
    }

    /// Applies one descent step in place and returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> f64 {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        self.steps += 1;
        let lr = self.cfg.learning_rate;
        match self.cfg.kind {
            OptimizerKind::Momentum => {
                for ((p, v), &g) in params.iter_mut().zip(&mut self.first).zip(grad) {
                    *v = self.cfg.momentum * *v + g * scale;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.cfg.momentum, self.cfg.beta2);
                let c1 = 1.0 - b1.powi(self.steps as i32);
                let c2 = 1.0 - b2.powi(self.steps as i32);
                for (((p, m), s), &g) in params.iter_mut().zip(&mut self.first).zip(&mut self.second).zip(grad) {
                    let g = g * scale;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *s = b2 * *s + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*s / c2).sqrt() + self.cfg.epsilon);
                }
            }
        }
        norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionMode {
    Greedy,
    Sample,
}

/// Greedy picks action 1 only where it is strictly more likely.
fn choose_actions(out: &PolicyOutput, mode: ActionMode, rng: &mut impl Rng) -> Result<ActionMap> {
    let bits = match mode {
        ActionMode::Greedy => out.logits.iter().map(|z| u8::from(z[1] > z[0])).collect(),
        ActionMode::Sample => (0..out.logits.len())
            .map(|p| u8::from(rng.random::<f64>() < out.log_probs[p][1].exp()))
            .collect(),
    };
    ActionMap::new(out.height, out.width, bits)
}

/// A dataset sample with its edge systems built once.
struct Prepared<'a> {
    sample: &'a Sample,
    split: Vec<crate::graph::SplitEdgeSystem>,
    merge: Vec<crate::graph::MergeEdgeSystem>,
}

fn rollout(
    params: &PolicyParams,
    prep: &Prepared,
    env: &EnvConfig,
    mode: ActionMode,
    rng: &mut impl Rng,
) -> Result<(Trajectory, Vec<(PolicyOutput, ForwardCache)>)> {
    let (mut ep, mut obs) = Episode::with_systems(
        prep.sample.image.clone(),
        prep.sample.labels.clone(),
        env,
        prep.split.clone(),
        prep.merge.clone(),
    )?;
    let mut steps = Vec::with_capacity(env.max_steps);
    let mut forwards = Vec::with_capacity(env.max_steps);
    while !ep.is_done() {
        let (out, cache) = forward_cached(params, &obs)?;
        let action = choose_actions(&out, mode, rng)?;
        let log_probs = action
            .bits()
            .iter()
            .zip(&out.log_probs)
            .map(|(&a, lp)| lp[usize::from(a)])
            .collect();
        let next = ep.step(&action)?;
        steps.push(TrajectoryStep {
            observation: std::mem::replace(&mut obs, next.observation),
            action,
            log_probs,
            values: out.values.clone(),
            reward: next.reward,
        });
        forwards.push((out, cache));
    }
    Ok((
        Trajectory {
            max_steps: env.max_steps,
            steps,
        },
        forwards,
    ))
}

/// Converts recorded environment steps into a learner trajectory.
pub fn trajectory_from_records(params: &PolicyParams, max_steps: usize, records: &[StepRecord]) -> Result<Trajectory> {
    let steps = records
        .iter()
        .map(|r| {
            let out = forward(params, &r.observation)?;
            Ok(TrajectoryStep {
                log_probs: r
                    .action
                    .bits()
                    .iter()
                    .zip(&out.log_probs)
                    .map(|(&a, lp)| lp[usize::from(a)])
                    .collect(),
                values: out.values,
                observation: r.observation.clone(),
                action: r.action.clone(),
                reward: r.reward.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory { max_steps, steps })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    /// Decoded instances after small-segment removal.
    pub labels: LabelMap,
    pub state: ColorState,
    pub actions: Vec<ActionMap>,
}

/// Rolls the policy for the configured number of steps and decodes instances.
pub fn infer(params: &PolicyParams, image: &Image, env: &EnvConfig, mode: ActionMode, seed: u64) -> Result<Inference> {
    env.validate()?;
    let (h, w) = image.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ColorState::new(h, w, env.max_steps)?;
    let mut actions = Vec::with_capacity(env.max_steps);
    while !state.is_finished() {
        let obs = Observation::assemble(image, &state)?;
        let out = forward(params, &obs)?;
        let a = choose_actions(&out, mode, &mut rng)?;
        state = state.apply_action(&a)?;
        actions.push(a);
    }
    let decoded = decode_instances(&state, env.connectivity)?;
    Ok(Inference {
        labels: remove_small_segments(&decoded, env.min_segment_area),
        state,
        actions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub updates: usize,
    pub workers: usize,
    pub seed: u64,
    /// Greedy evaluation period in updates; 0 disables evaluation.
    pub eval_interval: usize,
    /// Number of leading dataset samples used for evaluation.
    pub eval_samples: usize,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            updates: 1000,
            workers: 1,
            seed: 0,
            eval_interval: 100,
            eval_samples: 8,
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub sbd: f64,
    pub arand: f64,
}

/// One line of the training log. Reward fields are per-episode sums over
/// steps of per-pixel means, averaged over workers; components are unweighted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub update: usize,
    pub mean_reward: f64,
    pub step_rewards: Vec<f64>,
    pub bf: f64,
    pub split: f64,
    pub merge: f64,
    pub losses: Losses,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSnapshot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters after the last successful update.
    pub params: PolicyParams,
    pub updates_done: usize,
    pub records: Vec<TrainRecord>,
    /// Set when training halted on a non-finite loss, gradient or parameter.
    pub diverged: Option<String>,
}

struct WorkerResult {
    grad: Vec<f64>,
    losses: Losses,
    step_rewards: Vec<f64>,
    components: (f64, f64, f64),
}

fn worker_rng(seed: u64, update: usize, worker: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(update as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(worker as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn run_worker(
    params: &PolicyParams,
    prepared: &[Prepared],
    env: &EnvConfig,
    cfg: &TrainConfig,
    update: usize,
    worker: usize,
) -> Result<WorkerResult> {
    let mut rng = worker_rng(cfg.seed, update, worker);
    let prep = &prepared[rng.random_range(0..prepared.len())];
    let (traj, forwards) = rollout(params, prep, env, ActionMode::Sample, &mut rng)?;
    let ret = compute_returns(&traj, env.gamma)?;
    let (losses, grad) = objective(params, &traj, &forwards, &ret.returns, None, cfg.loss, true);
    let grad = grad.expect("gradient requested");
    finite_or(&losses, &grad)?;
    let mut components = (0.0, 0.0, 0.0);
    for s in &traj.steps {
        let (b, sp, m) = s.reward.component_means();
        components.0 += b;
        components.1 += sp;
        components.2 += m;
    }
    Ok(WorkerResult {
        grad,
        losses,
        step_rewards: traj.steps.iter().map(|s| s.reward.mean).collect(),
        components,
    })
}

fn collect(
    params: &PolicyParams,
    prepared: &[Prepared],
    env: &EnvConfig,
    cfg: &TrainConfig,
    update: usize,
) -> Vec<Result<WorkerResult>> {
    if cfg.workers == 1 {
        return vec![run_worker(params, prepared, env, cfg, update, 0)];
    }
    thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.workers)
            .map(|w| s.spawn(move || run_worker(params, prepared, env, cfg, update, w)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::InvalidParameter("worker panicked".into()))))
            .collect()
    })
}

/// Mean greedy SBD and ARand over the leading `count` samples.
pub fn evaluate_greedy(params: &PolicyParams, samples: &[Sample], env: &EnvConfig, count: usize) -> Result<EvalSnapshot> {
    let subset = &samples[..count.min(samples.len())];
    let (mut s, mut a) = (0.0, 0.0);
    for sample in subset {
        let inf = infer(params, &sample.image, env, ActionMode::Greedy, 0)?;
        s += sbd(&inf.labels, &sample.labels)?;
        a += arand(&inf.labels, &sample.labels, true)?;
    }
    let n = subset.len().max(1) as f64;
    Ok(EvalSnapshot { sbd: s / n, arand: a / n })
}

/// Synchronous advantage actor-critic. Every update collects one sampled
/// episode per worker, averages their gradients in worker order and applies
/// a single optimizer step, so results do not depend on thread scheduling.
pub fn train(
    samples: &[Sample],
    env: &EnvConfig,
    init: PolicyParams,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Dataset("training needs at least one sample".into()));
    }
    if cfg.workers == 0 {
        return Err(Error::InvalidParameter("workers must be >= 1".into()));
    }
    env.validate()?;
    cfg.optimizer.validate()?;
    let prepared = samples
        .iter()
        .map(|s| {
            let (split, merge) = crate::env::build_edge_systems(&s.labels, env)?;
            Ok(Prepared { sample: s, split, merge })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut params = init;
    let mut opt = Optimizer::new(cfg.optimizer, params.len());
    let mut records = Vec::new();
    for update in 0..cfg.updates {
        let results = collect(&params, &prepared, env, cfg, update);
        let mut grad = vec![0.0; params.len()];
        let mut rec = TrainRecord {
            update: update + 1,
            mean_reward: 0.0,
            step_rewards: vec![0.0; env.max_steps],
            bf: 0.0,
            split: 0.0,
            merge: 0.0,
            losses: Losses::default(),
            grad_norm: 0.0,
            eval: None,
        };
        let inv = 1.0 / cfg.workers as f64;
        for r in results {
            let r = match r {
                Ok(r) => r,
                Err(e @ Error::NonFinite(_)) => {
                    return Ok(halted(params, update, records, format!("update {}: {e}", update + 1)));
                }
                Err(e) => return Err(e),
            };
            grad.iter_mut().zip(&r.grad).for_each(|(g, x)| *g += x * inv);
            for (a, b) in rec.step_rewards.iter_mut().zip(&r.step_rewards) {
                *a += b * inv;
            }
            rec.bf += r.components.0 * inv;
            rec.split += r.components.1 * inv;
            rec.merge += r.components.2 * inv;
            rec.losses.policy += r.losses.policy * inv;
            rec.losses.value += r.losses.value * inv;
            rec.losses.entropy += r.losses.entropy * inv;
            rec.losses.total += r.losses.total * inv;
        }
        rec.mean_reward = rec.step_rewards.iter().sum();
        let mut next = params.values.clone();
        rec.grad_norm = opt.step(&mut next, &grad);
        if next.iter().any(|v| !v.is_finite()) {
            return Ok(halted(
                params,
                update,
                records,
                format!("update {}: non-finite parameters", update + 1),
            ));
        }
        params.values = next;
        let last = update + 1 == cfg.updates;
        if cfg.eval_interval > 0 && ((update + 1) % cfg.eval_interval == 0 || last) {
            rec.eval = Some(evaluate_greedy(&params, samples, env, cfg.eval_samples)?);
        }
        on_record(&rec);
        records.push(rec);
    }
    Ok(TrainOutcome {
        params,
        updates_done: cfg.updates,
        records,
        diverged: None,
    })
}

fn halted(params: PolicyParams, updates_done: usize, records: Vec<TrainRecord>, why: String) -> TrainOutcome {
    log::error!("training halted: {why}");
    TrainOutcome {
        params,
        updates_done,
        records,
        diverged: Some(why),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::ShrinkSpec;
    use crate::synth::{generate_synthetic, SynthConfig};

    fn reward_map(h: usize, w: usize, total: Vec<f64>) -> RewardMap {
        RewardMap {
            height: h,
            width: w,
            mean: RewardMap::mean_of(&total),
            bf: total.clone(),
            split: vec![0.0; h * w],
            merge: vec![0.0; h * w],
            total,
        }
    }

    fn single_pixel_traj(rewards: &[f64]) -> Trajectory {
        let img = Image::new(1, 1, 1, vec![0.5]).unwrap();
        let state = ColorState::new(1, 1, rewards.len()).unwrap();
        let obs = Observation::assemble(&img, &state).unwrap();
        Trajectory {
            max_steps: rewards.len(),
            steps: rewards
                .iter()
                .map(|&r| TrajectoryStep {
                    observation: obs.clone(),
                    action: ActionMap::zeros(1, 1),
                    log_probs: vec![-std::f64::consts::LN_2],
                    values: vec![0.25],
                    reward: reward_map(1, 1, vec![r]),
                })
                .collect(),
        }
    }

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn returns_examples() {
        let flat = |m: ReturnsMap| m.returns.iter().map(|r| r[0]).collect::<Vec<_>>();
        let r = compute_returns(&single_pixel_traj(&[0.1, 0.2, 0.3]), 1.0).unwrap();
        assert!(close(&flat(r.clone()), &[0.6, 0.5, 0.3]));
        assert!(close(&r.advantages.iter().map(|a| a[0]).collect::<Vec<_>>(), &[0.35, 0.25, 0.05]));
        let r = compute_returns(&single_pixel_traj(&[0.1, 0.2, 0.3]), 0.0).unwrap();
        assert!(close(&flat(r), &[0.1, 0.2, 0.3]));
        let r = compute_returns(&single_pixel_traj(&[1.0, 1.0]), 0.5).unwrap();
        assert!(close(&flat(r), &[1.5, 1.0]));
        let r = compute_returns(&single_pixel_traj(&[0.0, 0.0, 0.0]), 1.0).unwrap();
        assert!(r.returns.iter().all(|x| x[0] == 0.0));
    }

    #[test]
    fn incomplete_trajectory_rejected() {
        let mut t = single_pixel_traj(&[0.1, 0.2]);
        t.steps.pop();
        assert!(compute_returns(&t, 1.0).is_err());
    }

    fn tiny_params(seed: u64) -> PolicyParams {
        let spec = NetSpec {
            zero_policy_head: false,
            ..NetSpec::uniform(3, 3, &[1, 2])
        };
        PolicyParams::init(&spec, seed).unwrap()
    }

    #[test]
    fn zero_advantage_gives_zero_policy_gradient() {
        let params = tiny_params(4);
        let mut traj = synthetic_trajectory(&params, 4, 5, 2, 11).unwrap();
        // Make every return equal the value estimate so A = 0 and L_value = 0.
        let fw: Vec<PolicyOutput> = traj.steps.iter().map(|s| forward(&params, &s.observation).unwrap()).collect();
        for t in 0..traj.steps.len() {
            let next_v = fw.get(t + 1).map(|o| o.values.clone());
            let total = fw[t]
                .values
                .iter()
                .enumerate()
                .map(|(p, v)| v - next_v.as_ref().map_or(0.0, |n| n[p]))
                .collect();
            traj.steps[t].reward = reward_map(4, 5, total);
        }
        let loss = LossConfig {
            entropy_beta: 0.0,
            value_coef: 0.5,
        };
        let (l, g) = losses_and_gradients(&params, &traj, 1.0, loss).unwrap();
        assert!(l.value.abs() < 1e-20, "{}", l.value);
        assert!(l.policy.abs() < 1e-12);
        assert!(g.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn losses_are_in_range() {
        let params = tiny_params(1);
        let traj = synthetic_trajectory(&params, 4, 4, 2, 5).unwrap();
        let (l, _) = losses_and_gradients(&params, &traj, 0.9, LossConfig::default()).unwrap();
        assert!(l.value >= 0.0);
        assert!(l.entropy >= 0.0 && l.entropy <= std::f64::consts::LN_2 + 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        for kind in [OptimizerKind::Momentum, OptimizerKind::Adam] {
            let cfg = OptimizerConfig {
                kind,
                ..OptimizerConfig::default()
            };
            let mut opt = Optimizer::new(cfg, 3);
            let mut p = vec![0.5, -1.0, 2.0];
            for _ in 0..3 {
                opt.step(&mut p, &[0.0; 3]);
            }
            assert_eq!(p, vec![0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn gradient_clip_bounds_the_step() {
        let cfg = OptimizerConfig {
            learning_rate: 1.0,
            momentum: 0.0,
            grad_clip: 1.0,
            ..OptimizerConfig::default()
        };
        let mut opt = Optimizer::new(cfg, 2);
        let mut p = vec![0.0, 0.0];
        let norm = opt.step(&mut p, &[30.0, 40.0]);
        assert_eq!(norm, 50.0);
        assert!(close(&p, &[-0.6, -0.8]));
    }

    fn small_env() -> EnvConfig {
        EnvConfig {
            max_steps: 2,
            radii: vec![2],
            shrink: vec![ShrinkSpec { alpha: 0.8, min_size: 4 }],
            ..EnvConfig::default()
        }
    }

    fn small_data() -> Vec<Sample> {
        generate_synthetic(&SynthConfig {
            count: 2,
            height: 12,
            width: 12,
            max_objects: 2,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn untrained_greedy_inference_is_background() {
        let env = small_env();
        let params = PolicyParams::init(&NetSpec::uniform(3, 4, &[1]), 0).unwrap();
        let data = small_data();
        let inf = infer(&params, &data[0].image, &env, ActionMode::Greedy, 0).unwrap();
        assert_eq!(inf.labels.instance_count(), 0);
        assert_eq!(inf.actions.len(), 2);
        assert_eq!(inf, infer(&params, &data[0].image, &env, ActionMode::Greedy, 0).unwrap());
        let bad = Image::new(4, 4, 2, vec![0.0; 32]).unwrap();
        assert!(infer(&params, &bad, &env, ActionMode::Greedy, 0).is_err());
    }

    #[test]
    fn zero_updates_return_initial_params() {
        let env = small_env();
        let init = PolicyParams::init(&NetSpec::uniform(3, 4, &[1]), 9).unwrap();
        let cfg = TrainConfig {
            updates: 0,
            ..TrainConfig::default()
        };
        let out = train(&small_data(), &env, init.clone(), &cfg, |_| {}).unwrap();
        assert_eq!(out.params, init);
        assert!(out.records.is_empty());
        assert!(train(&[], &env, init, &cfg, |_| {}).is_err());
    }

    #[test]
    fn training_is_deterministic_and_thread_count_independent() {
        let env = small_env();
        let init = PolicyParams::init(&NetSpec::uniform(3, 4, &[1, 2]), 3).unwrap();
        let run = |workers| {
            let cfg = TrainConfig {
                updates: 4,
                workers,
                seed: 17,
                eval_interval: 2,
                eval_samples: 2,
                ..TrainConfig::default()
            };
            train(&small_data(), &env, init.clone(), &cfg, |_| {}).unwrap()
        };
        let a = run(1);
        let b = run(1);
        assert_eq!(a, b);
        assert_ne!(a.params, init);
        assert_eq!(a.records.len(), 4);
        assert!(a.records[1].eval.is_some() && a.records[0].eval.is_none());
        let c = run(2);
        let d = run(2);
        assert_eq!(c, d);
    }

    #[test]
    fn records_match_rollout_rewards() {
        let env = small_env();
        let init = PolicyParams::init(&NetSpec::uniform(3, 4, &[1]), 3).unwrap();
        let cfg = TrainConfig {
            updates: 1,
            eval_interval: 0,
            ..TrainConfig::default()
        };
        let out = train(&small_data(), &env, init, &cfg, |_| {}).unwrap();
        let r = &out.records[0];
        assert!((r.mean_reward - r.step_rewards.iter().sum::<f64>()).abs() < 1e-15);
        assert!(r.bf.is_finite() && r.split.is_finite() && r.merge.is_finite());
        let line = serde_json::to_string(r).unwrap();
        assert!(!line.contains("eval"));
    }

    #[test]
    fn divergence_halts_with_last_good_params() {
        let env = small_env();
        let init = PolicyParams::init(&NetSpec::uniform(3, 4, &[1]), 3).unwrap();
        let cfg = TrainConfig {
            updates: 50,
            eval_interval: 0,
            optimizer: OptimizerConfig {
                learning_rate: 1e300,
                grad_clip: 0.0,
                ..OptimizerConfig::default()
            },
            ..TrainConfig::default()
        };
        let out = train(&small_data(), &env, init, &cfg, |_| {}).unwrap();
        assert!(out.diverged.is_some());
        assert!(out.updates_done < 50);
        assert!(out.params.values.iter().all(|v| v.is_finite()));
    }
}
