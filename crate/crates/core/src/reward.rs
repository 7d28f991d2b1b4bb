//! Per-pixel reward for one coloring transition `C(t) -> C(t+1)`.
//!
//! Every term compares the pre-action coloring with the post-action coloring
//! of the same step, so the reward is a function of a single transition.
//! Ratio terms of pixels without edges are zero.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::graph::{MergeEdgeSystem, SplitEdgeSystem};
use crate::grid::{ColorState, LabelMap};

/// Shrinking factor and minimum inner-region size of one merging system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShrinkSpec {
    pub alpha: f64,
    pub min_size: usize,
}

impl Default for ShrinkSpec {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            min_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub w_split: f64,
    pub w_merge: f64,
    pub radii: Vec<usize>,
    pub shrink: Vec<ShrinkSpec>,
    pub max_steps: usize,
    /// Use `R_M = R_TM - (|FS_pre| - |FS_post|)/d` exactly as printed, which
    /// rewards growth of the falsely-split set. Off by default.
    pub paper_literal_signs: bool,
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_split < 0.0 || self.w_merge < 0.0 {
            return Err(Error::InvalidParameter("reward weights must be >= 0".into()));
        }
        if self.radii.is_empty() {
            return Err(Error::InvalidParameter("at least one splitting radius is required".into()));
        }
        if self.radii.contains(&0) {
            return Err(Error::InvalidParameter("splitting radius must be >= 1".into()));
        }
        if self.shrink.iter().any(|s| !(0.0..=1.0).contains(&s.alpha)) {
            return Err(Error::InvalidParameter("shrinking factor must be in [0, 1]".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidParameter("coloring steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Background/foreground reward magnitudes of one ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfWeights {
    /// Foreground fraction of the image.
    pub r_bg: f64,
    /// Background fraction of the image.
    pub r_fg: f64,
}

impl BfWeights {
    pub fn from_gt(gt: &LabelMap) -> Self {
        let n = gt.len().max(1) as f64;
        let fg = gt.foreground_count() as f64 / n;
        Self {
            r_bg: fg,
            r_fg: 1.0 - fg,
        }
    }
}

/// Reward of one transition with its per-component breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardMap {
    pub height: usize,
    pub width: usize,
    pub total: Vec<f64>,
    pub bf: Vec<f64>,
    /// Unweighted sum of splitting rewards over all radii.
    pub split: Vec<f64>,
    /// Unweighted sum of merging rewards over all shrink settings.
    pub merge: Vec<f64>,
    pub mean: f64,
}

impl RewardMap {
    pub fn mean_of(values: &[f64]) -> f64 {
        if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        }
    }

    pub fn component_means(&self) -> (f64, f64, f64) {
        (
            Self::mean_of(&self.bf),
            Self::mean_of(&self.split),
            Self::mean_of(&self.merge),
        )
    }

    /// Writes `<stem>_<component>.f32` little-endian rasters plus a JSON sidecar.
    pub fn dump(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, data) in [
            ("total", &self.total),
            ("bf", &self.bf),
            ("split", &self.split),
            ("merge", &self.merge),
        ] {
            let bytes: Vec<u8> = data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
            fs::write(dir.join(format!("{stem}_{name}.f32")), bytes)?;
            let sidecar = serde_json::json!({
                "height": self.height,
                "width": self.width,
                "component": name,
                "dtype": "f32le",
            });
            fs::write(
                dir.join(format!("{stem}_{name}.json")),
                serde_json::to_vec_pretty(&sidecar)?,
            )?;
        }
        Ok(())
    }
}

fn check_transition(pre: &ColorState, post: &ColorState) -> Result<()> {
    check_dims(pre.dims(), post.dims())?;
    if post.step() != pre.step() + 1 {
        return Err(Error::InvalidParameter(format!(
            "post state must be one step after pre state (got steps {} and {})",
            pre.step(),
            post.step()
        )));
    }
    Ok(())
}

/// Background/foreground reward. `t` is the index of the action step.
pub fn reward_bf(post: &ColorState, gt: &LabelMap, t: usize) -> Vec<f64> {
    let w = BfWeights::from_gt(gt);
    gt.labels()
        .iter()
        .zip(post.colors())
        .map(|(&label, &c)| match (label == 0, t == 0) {
            (true, _) if c == 0 => w.r_bg,
            (true, _) => -w.r_bg,
            (false, false) => 0.0,
            (false, true) if c == 1 => w.r_fg,
            (false, true) => -w.r_fg,
        })
        .collect()
}

/// The two splitting ratio terms `R_TS` and `R_FM` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitTerms {
    pub true_split_gain: Vec<f64>,
    pub false_merge: Vec<f64>,
}

pub fn split_terms(pre: &ColorState, post: &ColorState, sys: &SplitEdgeSystem, max_steps: usize) -> SplitTerms {
    let before = sys.counts(pre.colors());
    let after = sys.counts(post.colors());
    let inv_t = 1.0 / max_steps as f64;
    let n = before.degree.len();
    let mut out = SplitTerms {
        true_split_gain: vec![0.0; n],
        false_merge: vec![0.0; n],
    };
    for p in 0..n {
        let d = after.degree[p];
        if d == 0 {
            continue;
        }
        let d = f64::from(d);
        out.true_split_gain[p] =
            (f64::from(after.true_split[p]) - f64::from(before.true_split[p])) / d;
        out.false_merge[p] = inv_t * f64::from(after.false_merge[p]) / d;
    }
    out
}

/// `R_S = R_TS - R_FM` for one splitting system.
pub fn reward_split(pre: &ColorState, post: &ColorState, sys: &SplitEdgeSystem, max_steps: usize) -> Vec<f64> {
    let t = split_terms(pre, post, sys, max_steps);
    t.true_split_gain
        .iter()
        .zip(&t.false_merge)
        .map(|(ts, fm)| ts - fm)
        .collect()
}

/// The two merging ratio terms per pixel: `R_TM` and the falsely-split
/// reduction `(|FS_pre| - |FS_post|) / d`.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeTerms {
    pub true_merge: Vec<f64>,
    pub false_split_reduction: Vec<f64>,
}

pub fn merge_terms(pre: &ColorState, post: &ColorState, sys: &MergeEdgeSystem, max_steps: usize) -> MergeTerms {
    let before = sys.counts(pre.colors());
    let after = sys.counts(post.colors());
    let inv_t = 1.0 / max_steps as f64;
    let n = before.degree.len();
    let mut out = MergeTerms {
        true_merge: vec![0.0; n],
        false_split_reduction: vec![0.0; n],
    };
    for p in 0..n {
        let d = after.degree[p];
        if d == 0 {
            continue;
        }
        let d = f64::from(d);
        out.true_merge[p] = inv_t * f64::from(after.true_merge[p]) / d;
        out.false_split_reduction[p] =
            (f64::from(before.false_split[p]) - f64::from(after.false_split[p])) / d;
    }
    out
}

/// Merging reward for one system. By default the falsely-split reduction is
/// rewarded; `paper_literal_signs` subtracts it instead.
pub fn reward_merge(
    pre: &ColorState,
    post: &ColorState,
    sys: &MergeEdgeSystem,
    max_steps: usize,
    paper_literal_signs: bool,
) -> Vec<f64> {
    let t = merge_terms(pre, post, sys, max_steps);
    t.true_merge
        .iter()
        .zip(&t.false_split_reduction)
        .map(|(tm, fs)| if paper_literal_signs { tm - fs } else { tm + fs })
        .collect()
}

/// Full weighted reward for the transition `pre -> post`. The step index is
/// `pre.step()`; at step 0 only the background/foreground term is paid.
pub fn reward_total(
    pre: &ColorState,
    post: &ColorState,
    gt: &LabelMap,
    split_systems: &[SplitEdgeSystem],
    merge_systems: &[MergeEdgeSystem],
    cfg: &RewardConfig,
) -> Result<RewardMap> {
    check_transition(pre, post)?;
    check_dims(pre.dims(), gt.dims())?;
    if pre.max_steps() != cfg.max_steps {
        return Err(Error::InvalidParameter(format!(
            "state has {} steps but reward config has {}",
            pre.max_steps(),
            cfg.max_steps
        )));
    }
    for s in split_systems {
        check_dims(pre.dims(), s.dims())?;
    }
    for s in merge_systems {
        check_dims(pre.dims(), s.dims())?;
    }
    let t = pre.step();
    let n = gt.len();
    let bf = reward_bf(post, gt, t);
    let mut split = vec![0.0; n];
    let mut merge = vec![0.0; n];
    if t > 0 {
        for sys in split_systems {
            for (acc, v) in split.iter_mut().zip(reward_split(pre, post, sys, cfg.max_steps)) {
                *acc += v;
            }
        }
        for sys in merge_systems {
            let r = reward_merge(pre, post, sys, cfg.max_steps, cfg.paper_literal_signs);
            for (acc, v) in merge.iter_mut().zip(r) {
                *acc += v;
            }
        }
    }
    let total: Vec<f64> = (0..n)
        .map(|p| bf[p] + cfg.w_merge * merge[p] + cfg.w_split * split[p])
        .collect();
    let mean = RewardMap::mean_of(&total);
    let (height, width) = gt.dims();
    Ok(RewardMap {
        height,
        width,
        total,
        bf,
        split,
        merge,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_merge_system, build_split_system};
    use crate::grid::ActionMap;

    fn states(h: usize, w: usize, t: usize, steps: &[Vec<u8>]) -> Vec<ColorState> {
        let mut out = vec![ColorState::new(h, w, t).unwrap()];
        for a in steps {
            let next = out
                .last()
                .unwrap()
                .apply_action(&ActionMap::new(h, w, a.clone()).unwrap())
                .unwrap();
            out.push(next);
        }
        out
    }

    #[test]
    fn bf_weights_are_swapped_area_fractions() {
        let mut labels = vec![0u16; 100];
        labels[..30].fill(1);
        let gt = LabelMap::new(10, 10, labels).unwrap();
        let w = BfWeights::from_gt(&gt);
        assert!((w.r_bg - 0.3).abs() < 1e-15);
        assert!((w.r_fg - 0.7).abs() < 1e-15);
    }

    #[test]
    fn bf_cases() {
        // pixel 0 background, pixel 1 foreground; fg fraction 0.5.
        let gt = LabelMap::from_rows(&[[0u16, 1]]).unwrap();
        let s = states(1, 2, 3, &[vec![0, 0], vec![0, 1], vec![0, 0]]);
        let r0 = reward_bf(&s[1], &gt, 0);
        assert_eq!(r0, vec![0.5, -0.5]);
        let r1 = reward_bf(&s[2], &gt, 1);
        assert_eq!(r1, vec![0.5, 0.0]);
        let s = states(1, 2, 3, &[vec![1, 1]]);
        assert_eq!(reward_bf(&s[1], &gt, 0), vec![-0.5, 0.5]);
        // background pixel that turned nonzero later
        let s = states(1, 2, 3, &[vec![0, 1], vec![1, 0]]);
        assert_eq!(reward_bf(&s[2], &gt, 1), vec![-0.5, 0.0]);
    }

    #[test]
    fn split_pair_diverging_and_staying_merged() {
        let gt = LabelMap::from_rows(&[[1u16, 2]]).unwrap();
        let sys = build_split_system(&gt, 2).unwrap();
        assert_eq!(sys.degree(0), 1);
        let s = states(1, 2, 4, &[vec![1, 1], vec![0, 1]]);
        assert_eq!(reward_split(&s[1], &s[2], &sys, 4), vec![1.0, 1.0]);
        let s = states(1, 2, 4, &[vec![1, 1], vec![1, 1]]);
        assert_eq!(reward_split(&s[1], &s[2], &sys, 4), vec![-0.25, -0.25]);
    }

    #[test]
    fn isolated_segment_gets_no_split_reward() {
        let gt = LabelMap::from_rows(&[[1u16, 1, 0, 0, 0, 2]]).unwrap();
        let sys = build_split_system(&gt, 2).unwrap();
        let s = states(1, 6, 3, &[vec![1; 6], vec![1, 0, 0, 0, 0, 1]]);
        assert!(reward_split(&s[1], &s[2], &sys, 3).iter().all(|&v| v == 0.0));
    }

    /// Plus-shaped segment: the centre c is the whole inner region, so an arm
    /// pixel b has degree 1 and c has degree 0.
    fn plus_gt() -> LabelMap {
        LabelMap::from_rows(&[[0u16, 1, 0], [1, 1, 1], [0, 1, 0]]).unwrap()
    }

    #[test]
    fn merge_boundary_pixel_rewards() {
        let gt = plus_gt();
        let sys = build_merge_system(&gt, 0.8, 1).unwrap();
        assert_eq!(sys.inner_of_label(1).unwrap(), &[4]);
        let (b, c) = (1, 4);
        assert_eq!(sys.degree(b), 1);
        assert_eq!(sys.degree(c), 0);

        let fg = vec![0, 1, 0, 1, 1, 1, 0, 1, 0];
        let s = states(3, 3, 4, &[fg.clone(), vec![0; 9]]);
        let r = reward_merge(&s[1], &s[2], &sys, 4, false);
        assert_eq!(r[b], 0.25);
        assert_eq!(r[c], 0.0);

        // b and c diverge: FS grows 0 -> 1, TM drops to 0.
        let mut diverge = vec![0; 9];
        diverge[b] = 1;
        let s = states(3, 3, 4, &[fg, diverge]);
        let r = reward_merge(&s[1], &s[2], &sys, 4, false);
        assert_eq!(r[b], -1.0);
        let literal = reward_merge(&s[1], &s[2], &sys, 4, true);
        assert_eq!(literal[b], 1.0);
    }

    #[test]
    fn total_is_bf_only_at_step_zero() {
        let gt = LabelMap::from_rows(&[[1u16, 2, 0, 0]]).unwrap();
        let cfg = RewardConfig {
            w_split: 1.5,
            w_merge: 1.0,
            radii: vec![3],
            shrink: vec![ShrinkSpec { alpha: 0.8, min_size: 1 }],
            max_steps: 2,
            paper_literal_signs: false,
        };
        let split = vec![build_split_system(&gt, 3).unwrap()];
        let merge = vec![build_merge_system(&gt, 0.8, 1).unwrap()];
        let s = states(1, 4, 2, &[vec![1, 1, 0, 0], vec![0, 1, 0, 0]]);
        let r0 = reward_total(&s[0], &s[1], &gt, &split, &merge, &cfg).unwrap();
        assert_eq!(r0.total, r0.bf);
        assert_eq!(r0.total, vec![0.5, 0.5, 0.5, 0.5]);
        assert_eq!(r0.mean, 0.5);
        let r1 = reward_total(&s[1], &s[2], &gt, &split, &merge, &cfg).unwrap();
        for p in 0..4 {
            assert_eq!(r1.total[p], r1.bf[p] + 1.0 * r1.merge[p] + 1.5 * r1.split[p]);
        }
        // Pixels 0 and 1 split on this step: R_TS = 1 each.
        assert_eq!(r1.split[0], 1.0);
        assert!(reward_total(&s[0], &s[2], &gt, &split, &merge, &cfg).is_err());
    }

    #[test]
    fn all_background_image_has_zero_bf() {
        let gt = LabelMap::zeros(2, 2);
        let s = states(2, 2, 1, &[vec![0; 4]]);
        assert!(reward_bf(&s[1], &gt, 0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        let mut cfg = RewardConfig {
            w_split: 1.0,
            w_merge: 1.0,
            radii: vec![],
            shrink: vec![],
            max_steps: 1,
            paper_literal_signs: false,
        };
        assert!(cfg.validate().is_err());
        cfg.radii = vec![2];
        assert!(cfg.validate().is_ok());
        cfg.w_merge = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dump_writes_rasters_and_sidecars() {
        let dir = tempfile::tempdir().unwrap();
        let map = RewardMap {
            height: 1,
            width: 2,
            total: vec![0.5, -1.0],
            bf: vec![0.5, -1.0],
            split: vec![0.0; 2],
            merge: vec![0.0; 2],
            mean: -0.25,
        };
        map.dump(dir.path(), "step0").unwrap();
        let raw = std::fs::read(dir.path().join("step0_total.f32")).unwrap();
        assert_eq!(raw.len(), 8);
        assert_eq!(f32::from_le_bytes(raw[4..8].try_into().unwrap()), -1.0);
        let side: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("step0_total.json")).unwrap()).unwrap();
        assert_eq!(side["width"], 2);
    }
}
