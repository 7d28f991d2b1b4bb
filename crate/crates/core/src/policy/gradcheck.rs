//! Central finite-difference verification of the analytic gradient.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{forward, Activation, ConvLayerSpec, NetSpec, PolicyParams};
use super::{compute_returns, forward_all, objective, LossConfig, Trajectory, TrajectoryStep};
use crate::env::Observation;
use crate::error::{Error, Result};
use crate::grid::{ActionMap, ColorState, Image};
use crate::reward::RewardMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub nets: usize,
    pub coords_per_net: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Fraction of coordinates that must meet `tolerance`.
    pub min_pass_fraction: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub max_params: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            nets: 5,
            coords_per_net: 200,
            step: 1e-5,
            tolerance: 1e-4,
            min_pass_fraction: 0.95,
            floor: 1e-8,
            max_params: 5000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetCheck {
    pub params: usize,
    pub checked: usize,
    pub passed: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub nets: Vec<NetCheck>,
    pub checked: usize,
    pub passed: usize,
    pub max_rel_error: f64,
    pub worst_net_fraction: f64,
    pub ok: bool,
}

/// A random complete trajectory for `params` on an `h x w` canvas with
/// `max_steps` steps: random image, random actions, uniform rewards in
/// `[-1, 1]`, with log-probabilities and values from the network.
pub fn synthetic_trajectory(
    params: &PolicyParams,
    h: usize,
    w: usize,
    max_steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    let k = params
        .spec
        .input_channels
        .checked_sub(max_steps)
        .filter(|&k| k > 0)
        .ok_or_else(|| Error::InvalidParameter("network inputs must exceed the step count".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = h * w;
    let image = Image::new(h, w, k, (0..n * k).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let mut state = ColorState::new(h, w, max_steps)?;
    let mut steps = Vec::with_capacity(max_steps);
    for _ in 0..max_steps {
        let observation = Observation::assemble(&image, &state)?;
        let action = ActionMap::new(h, w, (0..n).map(|_| rng.random_range(0..2u8)).collect())?;
        let out = forward(params, &observation)?;
        let total: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        steps.push(TrajectoryStep {
            log_probs: action
                .bits()
                .iter()
                .zip(&out.log_probs)
                .map(|(&a, lp)| lp[usize::from(a)])
                .collect(),
            values: out.values,
            reward: RewardMap {
                height: h,
                width: w,
                mean: RewardMap::mean_of(&total),
                bf: total.clone(),
                split: vec![0.0; n],
                merge: vec![0.0; n],
                total,
            },
            observation,
            action: action.clone(),
        });
        state = state.apply_action(&action)?;
    }
    Ok(Trajectory { max_steps, steps })
}

fn random_spec(rng: &mut ChaCha8Rng, input_channels: usize) -> NetSpec {
    let layers = (0..rng.random_range(1..=3))
        .map(|_| ConvLayerSpec {
            kernel: if rng.random_bool(0.8) { 3 } else { 1 },
            channels: rng.random_range(2..=8),
            dilation: rng.random_range(1..=3),
            activation: if rng.random_bool(0.5) { Activation::Relu } else { Activation::Tanh },
        })
        .collect();
    NetSpec {
        input_channels,
        layers,
        zero_policy_head: false,
    }
}

fn check_one(cfg: &GradCheckConfig, index: usize) -> Result<NetCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(index as u64).wrapping_mul(0x2545_F491_4F6C_DD1D));
    let max_steps = rng.random_range(1..=3);
    let image_channels = rng.random_range(1..=2);
    // Redraw until the net has enough coordinates to sample without repeats.
    let spec = (0..1000)
        .map(|_| random_spec(&mut rng, image_channels + max_steps))
        .find(|s| (cfg.coords_per_net..=cfg.max_params).contains(&s.param_count()))
        .ok_or_else(|| Error::InvalidParameter(format!("no random net with {} to {} parameters", cfg.coords_per_net, cfg.max_params)))?;
    let mut params = PolicyParams::init(&spec, rng.random())?;
    // Nonzero biases keep ReLU units away from the all-equal degenerate case.
    for v in params.values.iter_mut() {
        *v += rng.random_range(-0.1..0.1);
    }
    let (h, w) = (rng.random_range(3..=7), rng.random_range(3..=7));
    let traj = synthetic_trajectory(&params, h, w, max_steps, rng.random())?;
    let gamma = rng.random_range(0.5..=1.0);
    let loss = LossConfig {
        entropy_beta: 0.05,
        value_coef: 0.5,
    };
    let ret = compute_returns(&traj, gamma)?;
    let forwards = forward_all(&params, &traj)?;
    let frozen: Vec<Vec<f64>> = ret
        .returns
        .iter()
        .zip(&forwards)
        .map(|(r, (fw, _))| r.iter().zip(&fw.values).map(|(r, v)| r - v).collect())
        .collect();
    let (_, grad) = objective(&params, &traj, &forwards, &ret.returns, None, loss, true);
    let grad = grad.expect("gradient requested");
    let coords = sample_indices(&mut rng, params.len(), cfg.coords_per_net.min(params.len()));
    let mut probe = params.clone();
    let mut eval_at = |j: usize, value: f64| -> Result<f64> {
        probe.values[j] = value;
        let fw = forward_all(&probe, &traj)?;
        Ok(objective(&probe, &traj, &fw, &ret.returns, Some(&frozen), loss, false).0.total)
    };
    let (mut passed, mut worst) = (0, 0.0f64);
    for j in coords.iter() {
        let x = params.values[j];
        let plus = eval_at(j, x + cfg.step)?;
        let minus = eval_at(j, x - cfg.step)?;
        eval_at(j, x)?;
        let fd = (plus - minus) / (2.0 * cfg.step);
        let rel = (grad[j] - fd).abs() / grad[j].abs().max(fd.abs()).max(cfg.floor);
        worst = worst.max(rel);
        if rel < cfg.tolerance {
            passed += 1;
        }
    }
    Ok(NetCheck {
        params: params.len(),
        checked: coords.len(),
        passed,
        max_rel_error: worst,
    })
}

/// Compares analytic and finite-difference gradients on random tiny nets.
pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.nets == 0 || cfg.coords_per_net == 0 || cfg.coords_per_net > cfg.max_params || cfg.step <= 0.0 {
        return Err(Error::InvalidParameter("gradient check needs nets, coordinates and a positive step".into()));
    }
    let nets = (0..cfg.nets).map(|i| check_one(cfg, i)).collect::<Result<Vec<_>>>()?;
    let checked = nets.iter().map(|n| n.checked).sum();
    let passed = nets.iter().map(|n| n.passed).sum();
    let worst_net_fraction = nets
        .iter()
        .map(|n| n.passed as f64 / n.checked as f64)
        .fold(1.0, f64::min);
    Ok(GradCheckReport {
        max_rel_error: nets.iter().map(|n| n.max_rel_error).fold(0.0, f64::max),
        ok: worst_net_fraction >= cfg.min_pass_fraction,
        nets,
        checked,
        passed,
        worst_net_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_check_passes() {
        let report = gradient_check(&GradCheckConfig::default()).unwrap();
        assert!(report.ok, "{report:?}");
        assert_eq!(report.nets.len(), 5);
        assert!(report.nets.iter().all(|n| n.params <= 5000 && n.checked == 200));
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        // A wrong step size cannot rescue a check: FD at h = 1 deviates.
        let cfg = GradCheckConfig {
            step: 1.0,
            nets: 2,
            ..GradCheckConfig::default()
        };
        let report = gradient_check(&cfg).unwrap();
        assert!(report.max_rel_error > 1e-4);
    }

    #[test]
    fn trajectory_needs_image_channels() {
        let p = PolicyParams::init(&NetSpec::uniform(2, 2, &[1]), 0).unwrap();
        assert!(synthetic_trajectory(&p, 3, 3, 2, 0).is_err());
        let t = synthetic_trajectory(&p, 3, 3, 1, 0).unwrap();
        assert!(t.is_complete());
    }
}
