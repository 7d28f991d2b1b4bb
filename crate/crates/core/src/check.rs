//! Randomized verification harness: reward counts against the brute-force
//! edge oracle, telescoping of the true-split gain, optimality of scripted
//! ground-truth colorings, and the gradient check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{build_edge_systems, scripted_gt_actions, EnvConfig, Episode};
use crate::error::{Error, Result};
use crate::graph::{brute_force_edges, build_merge_system, build_split_system};
use crate::grid::{ActionMap, ColorState, LabelMap};
use crate::policy::{gradient_check, GradCheckConfig, GradCheckReport};
use crate::reward::split_terms;
use crate::synth::{generate_synthetic, SynthConfig};

const ORACLE_ALPHAS: [f64; 3] = [0.5, 0.8, 1.0];

/// Random ground truth of at most `max_side` per side with 1 to
/// `max_segments` labels: pixels take the label of the Manhattan-nearest seed
/// point, and a quarter of them are background.
pub fn random_label_map(rng: &mut impl Rng, max_side: usize, max_segments: u16) -> Result<LabelMap> {
    let h = rng.random_range(1..=max_side);
    let w = rng.random_range(1..=max_side);
    let k = rng.random_range(1..=max_segments);
    let seeds: Vec<(usize, usize)> = (0..k).map(|_| (rng.random_range(0..h), rng.random_range(0..w))).collect();
    let mut labels = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            if rng.random_bool(0.25) {
                labels.push(0);
                continue;
            }
            let nearest = seeds
                .iter()
                .enumerate()
                .min_by_key(|(_, &(sy, sx))| sy.abs_diff(y) + sx.abs_diff(x))
                .map_or(0, |(i, _)| i);
            labels.push(nearest as u16 + 1);
        }
    }
    LabelMap::new(h, w, labels)
}

fn random_coloring(rng: &mut impl Rng, h: usize, w: usize) -> Result<ColorState> {
    let t = rng.random_range(1..=4);
    let mut state = ColorState::new(h, w, t)?;
    for _ in 0..rng.random_range(0..=t) {
        state = state.apply_action(&random_action(rng, h, w)?)?;
    }
    Ok(state)
}

fn random_action(rng: &mut impl Rng, h: usize, w: usize) -> Result<ActionMap> {
    ActionMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..2u8)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub cases: usize,
    pub pixels: usize,
    pub mismatches: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_mismatch: Option<String>,
    pub ok: bool,
}

/// Compares histogram-based TS/FM/TM/FS counts with the explicit edge lists.
pub fn reward_oracle_check(cases: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pixels, mut mismatches, mut first) = (0, 0, None);
    for case in 0..cases {
        let gt = random_label_map(&mut rng, 16, 6)?;
        let r = rng.random_range(1..=6);
        let alpha = ORACLE_ALPHAS[rng.random_range(0..ORACLE_ALPHAS.len())];
        let min_size = rng.random_range(1..=6);
        let colors = random_coloring(&mut rng, gt.height(), gt.width())?;
        let explicit = brute_force_edges(&gt, r, alpha, min_size)?;
        let split = build_split_system(&gt, r)?.counts(colors.colors());
        let merge = build_merge_system(&gt, alpha, min_size)?.counts(colors.colors());
        let want_split = explicit.split_counts(colors.colors());
        let want_merge = explicit.merge_counts(colors.colors());
        pixels += gt.len();
        for p in 0..gt.len() {
            let got = (
                split.degree[p],
                split.true_split[p],
                split.false_merge[p],
                merge.degree[p],
                merge.true_merge[p],
                merge.false_split[p],
            );
            let want = (
                want_split.degree[p],
                want_split.true_split[p],
                want_split.false_merge[p],
                want_merge.degree[p],
                want_merge.true_merge[p],
                want_merge.false_split[p],
            );
            if got != want {
                mismatches += 1;
                first.get_or_insert_with(|| {
                    format!("case {case} (r={r}, alpha={alpha}, min_size={min_size}) pixel {p}: got {got:?}, oracle {want:?}")
                });
            }
        }
    }
    Ok(OracleReport {
        cases,
        pixels,
        mismatches,
        first_mismatch: first,
        ok: mismatches == 0 && cases > 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelescopeReport {
    pub episodes: usize,
    pub pixels: usize,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub ok: bool,
}

/// Checks that the summed true-split gains over steps `1..T` equal the
/// endpoint difference `(|TS| at the end - |TS| after step 1) / degree`.
pub fn telescoping_check(episodes: usize, seed: u64, tolerance: f64) -> Result<TelescopeReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pixels, mut worst) = (0, 0.0f64);
    for _ in 0..episodes {
        let gt = random_label_map(&mut rng, 16, 6)?;
        let (h, w) = gt.dims();
        let t_max = rng.random_range(2..=6);
        let sys = build_split_system(&gt, rng.random_range(1..=6))?;
        let mut states = vec![ColorState::new(h, w, t_max)?];
        for _ in 0..t_max {
            let next = states.last().expect("state").apply_action(&random_action(&mut rng, h, w)?)?;
            states.push(next);
        }
        let mut sum = vec![0.0; h * w];
        for t in 1..t_max {
            let terms = split_terms(&states[t], &states[t + 1], &sys, t_max);
            sum.iter_mut().zip(&terms.true_split_gain).for_each(|(s, g)| *s += g);
        }
        let first = sys.counts(states[1].colors());
        let last = sys.counts(states[t_max].colors());
        for p in 0..h * w {
            let d = last.degree[p];
            let expect = if d == 0 {
                0.0
            } else {
                (f64::from(last.true_split[p]) - f64::from(first.true_split[p])) / f64::from(d)
            };
            worst = worst.max((sum[p] - expect).abs());
        }
        pixels += h * w;
    }
    Ok(TelescopeReport {
        episodes,
        pixels,
        max_abs_error: worst,
        tolerance,
        ok: worst <= tolerance && episodes > 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalityReport {
    pub instances: usize,
    pub random_sequences: usize,
    /// Instances whose scripted coloring left no false merge or false split.
    pub clean: usize,
    /// Instances where the scripted total beat every random sequence.
    pub dominant: usize,
    /// Smallest scripted-minus-best-random total over all instances.
    pub min_margin: f64,
    pub ok: bool,
}

fn episode_total(gt: &LabelMap, image: &crate::grid::Image, cfg: &EnvConfig, actions: &[ActionMap]) -> Result<(f64, Episode)> {
    let (mut ep, _) = Episode::reset(image.clone(), gt.clone(), cfg)?;
    for a in actions {
        ep.step(a)?;
    }
    Ok((ep.total_mean_reward(), ep))
}

/// Scripted ground-truth colorings against random action sequences on
/// synthetic scenes under `cfg`.
pub fn optimality_check(instances: usize, random_sequences: usize, seed: u64, cfg: &EnvConfig) -> Result<OptimalityReport> {
    let samples = generate_synthetic(&SynthConfig {
        count: instances,
        seed,
        ..SynthConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let (mut clean, mut dominant, mut min_margin) = (0, 0, f64::INFINITY);
    for s in &samples {
        let (h, w) = s.labels.dims();
        let scripted = scripted_gt_actions(&s.labels, cfg)?;
        let (total, ep) = episode_total(&s.labels, &s.image, cfg, &scripted)?;
        let colors = ep.state().colors();
        let (split, merge) = build_edge_systems(&s.labels, cfg)?;
        let no_fm = split.iter().all(|sys| sys.counts(colors).false_merge.iter().all(|&c| c == 0));
        let no_fs = merge.iter().all(|sys| sys.counts(colors).false_split.iter().all(|&c| c == 0));
        if no_fm && no_fs {
            clean += 1;
        }
        let mut best = f64::NEG_INFINITY;
        for _ in 0..random_sequences {
            let acts = (0..cfg.max_steps)
                .map(|_| random_action(&mut rng, h, w))
                .collect::<Result<Vec<_>>>()?;
            best = best.max(episode_total(&s.labels, &s.image, cfg, &acts)?.0);
        }
        if total > best {
            dominant += 1;
        }
        min_margin = min_margin.min(total - best);
    }
    Ok(OptimalityReport {
        instances,
        random_sequences,
        clean,
        dominant,
        min_margin,
        ok: instances > 0 && clean == instances && dominant == instances,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckMode {
    RewardOracle,
    Grad,
    Telescoping,
    Optimality,
    All,
}

impl CheckMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reward-oracle" => Ok(Self::RewardOracle),
            "grad" => Ok(Self::Grad),
            "telescoping" => Ok(Self::Telescoping),
            "optimality" => Ok(Self::Optimality),
            "all" => Ok(Self::All),
            other => Err(Error::InvalidParameter(format!("unknown check mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward_oracle: Option<OracleReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad: Option<GradCheckReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub telescoping: Option<TelescopeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimality: Option<OptimalityReport>,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckConfig {
    pub cases: usize,
    pub episodes: usize,
    pub instances: usize,
    pub random_sequences: usize,
    pub tolerance: f64,
    pub seed: u64,
    pub grad: GradCheckConfig,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            cases: 200,
            episodes: 50,
            instances: 50,
            random_sequences: 100,
            tolerance: 1e-10,
            seed: 0,
            grad: GradCheckConfig::default(),
        }
    }
}

pub fn run_checks(mode: CheckMode, cfg: &CheckConfig) -> Result<CheckReport> {
    let on = |m: CheckMode| mode == m || mode == CheckMode::All;
    let reward_oracle = on(CheckMode::RewardOracle)
        .then(|| reward_oracle_check(cfg.cases, cfg.seed))
        .transpose()?;
    let grad = on(CheckMode::Grad)
        .then(|| gradient_check(&GradCheckConfig { seed: cfg.seed, ..cfg.grad }))
        .transpose()?;
    let telescoping = on(CheckMode::Telescoping)
        .then(|| telescoping_check(cfg.episodes, cfg.seed, cfg.tolerance))
        .transpose()?;
    let optimality = on(CheckMode::Optimality)
        .then(|| optimality_check(cfg.instances, cfg.random_sequences, cfg.seed, &EnvConfig::default()))
        .transpose()?;
    let ok = reward_oracle.as_ref().is_none_or(|r| r.ok)
        && grad.as_ref().is_none_or(|r| r.ok)
        && telescoping.as_ref().is_none_or(|r| r.ok)
        && optimality.as_ref().is_none_or(|r| r.ok);
    Ok(CheckReport {
        reward_oracle,
        grad,
        telescoping,
        optimality,
        ok,
    })
}
