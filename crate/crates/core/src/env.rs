//! The episodic coloring environment.
//!
//! An episode colors one image in `max_steps` binary steps. Edge systems are
//! built once at reset from the ground truth and reused by every step.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::graph::{build_merge_system, build_split_system, MergeEdgeSystem, SplitEdgeSystem};
use crate::grid::{ActionMap, ColorState, Connectivity, Image, LabelMap, MAX_COLOR_STEPS};
use crate::reward::{reward_total, RewardConfig, RewardMap, ShrinkSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Number of binary coloring steps per episode.
    pub max_steps: usize,
    pub radii: Vec<usize>,
    pub shrink: Vec<ShrinkSpec>,
    pub w_split: f64,
    pub w_merge: f64,
    pub gamma: f64,
    pub connectivity: Connectivity,
    pub paper_literal_signs: bool,
    /// Segments below this area are dropped after inference.
    pub min_segment_area: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            max_steps: 5,
            radii: vec![12, 28],
            shrink: vec![ShrinkSpec::default()],
            w_split: 1.5,
            w_merge: 1.0,
            gamma: 1.0,
            connectivity: Connectivity::Four,
            paper_literal_signs: false,
            min_segment_area: 4,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig {
            w_split: self.w_split,
            w_merge: self.w_merge,
            radii: self.radii.clone(),
            shrink: self.shrink.clone(),
            max_steps: self.max_steps,
            paper_literal_signs: self.paper_literal_signs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 || self.max_steps > MAX_COLOR_STEPS {
            return Err(Error::InvalidParameter(format!(
                "max_steps must be in 1..={MAX_COLOR_STEPS}"
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidParameter("gamma must be in [0, 1]".into()));
        }
        self.reward_config().validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Agent input: image channels followed by the `max_steps` bit planes,
/// laid out height x width x channels with channels fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    pub image_channels: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Observation {
    pub fn assemble(image: &Image, state: &ColorState) -> Result<Self> {
        check_dims(image.dims(), state.dims())?;
        let (h, w) = image.dims();
        let k = image.channels();
        let t = state.max_steps();
        let channels = k + t;
        let mut data = Vec::with_capacity(h * w * channels);
        let samples = image.samples();
        for (p, &color) in state.colors().iter().enumerate() {
            data.extend_from_slice(&samples[p * k..(p + 1) * k]);
            data.extend((0..t).map(|b| f64::from((color >> b) & 1)));
        }
        Ok(Self {
            height: h,
            width: w,
            image_channels: k,
            channels,
            data,
        })
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Bit plane `k` as stored in the observation.
    pub fn bit_plane(&self, k: usize) -> Vec<u8> {
        let off = self.image_channels + k;
        self.data
            .chunks_exact(self.channels)
            .map(|px| px[off] as u8)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub observation: Observation,
    pub action: ActionMap,
    pub reward: RewardMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: RewardMap,
    pub done: bool,
}

/// One coloring episode over an (image, ground truth) pair.
#[derive(Debug, Clone)]
pub struct Episode {
    image: Image,
    gt: LabelMap,
    cfg: EnvConfig,
    reward_cfg: RewardConfig,
    state: ColorState,
    split: Vec<SplitEdgeSystem>,
    merge: Vec<MergeEdgeSystem>,
    trajectory: Vec<StepRecord>,
}

/// Builds the configured edge systems for a ground truth.
pub fn build_edge_systems(
    gt: &LabelMap,
    cfg: &EnvConfig,
) -> Result<(Vec<SplitEdgeSystem>, Vec<MergeEdgeSystem>)> {
    let split = cfg
        .radii
        .iter()
        .map(|&r| build_split_system(gt, r))
        .collect::<Result<Vec<_>>>()?;
    let merge = cfg
        .shrink
        .iter()
        .map(|s| build_merge_system(gt, s.alpha, s.min_size))
        .collect::<Result<Vec<_>>>()?;
    Ok((split, merge))
}

impl Episode {
    pub fn reset(image: Image, gt: LabelMap, cfg: &EnvConfig) -> Result<(Self, Observation)> {
        cfg.validate()?;
        check_dims(image.dims(), gt.dims())?;
        let (split, merge) = build_edge_systems(&gt, cfg)?;
        Self::with_systems(image, gt, cfg, split, merge)
    }

    /// Like [`Episode::reset`] but reuses edge systems already built for `gt`.
    pub fn with_systems(
        image: Image,
        gt: LabelMap,
        cfg: &EnvConfig,
        split: Vec<SplitEdgeSystem>,
        merge: Vec<MergeEdgeSystem>,
    ) -> Result<(Self, Observation)> {
        cfg.validate()?;
        check_dims(image.dims(), gt.dims())?;
        if split.len() != cfg.radii.len()
            || merge.len() != cfg.shrink.len()
            || split.iter().any(|s| s.dims() != gt.dims())
            || merge.iter().any(|m| m.dims() != gt.dims())
        {
            return Err(Error::ShapeMismatch("edge systems do not match the configuration".into()));
        }
        let (h, w) = gt.dims();
        let state = ColorState::new(h, w, cfg.max_steps)?;
        let obs = Observation::assemble(&image, &state)?;
        let ep = Self {
            image,
            gt,
            cfg: cfg.clone(),
            reward_cfg: cfg.reward_config(),
            state,
            split,
            merge,
            trajectory: Vec::with_capacity(cfg.max_steps),
        };
        Ok((ep, obs))
    }

    pub fn step(&mut self, action: &ActionMap) -> Result<StepOutcome> {
        if self.state.is_finished() {
            return Err(Error::EpisodeFinished(self.cfg.max_steps));
        }
        let before = Observation::assemble(&self.image, &self.state)?;
        let next = self.state.apply_action(action)?;
        let reward = reward_total(
            &self.state,
            &next,
            &self.gt,
            &self.split,
            &self.merge,
            &self.reward_cfg,
        )?;
        self.state = next;
        let observation = Observation::assemble(&self.image, &self.state)?;
        self.trajectory.push(StepRecord {
            observation: before,
            action: action.clone(),
            reward: reward.clone(),
        });
        Ok(StepOutcome {
            observation,
            reward,
            done: self.state.is_finished(),
        })
    }

    pub fn state(&self) -> &ColorState {
        &self.state
    }

    pub fn t(&self) -> usize {
        self.state.step()
    }

    pub fn is_done(&self) -> bool {
        self.state.is_finished()
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn ground_truth(&self) -> &LabelMap {
        &self.gt
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn split_systems(&self) -> &[SplitEdgeSystem] {
        &self.split
    }

    pub fn merge_systems(&self) -> &[MergeEdgeSystem] {
        &self.merge
    }

    pub fn trajectory(&self) -> &[StepRecord] {
        &self.trajectory
    }

    /// Sum over steps of the mean per-pixel reward.
    pub fn total_mean_reward(&self) -> f64 {
        self.trajectory.iter().map(|r| r.reward.mean).sum()
    }
}

/// Action sequence that colors every ground-truth segment uniformly with an
/// odd color, giving segments that are adjacent under the largest radius
/// different colors (greedy graph coloring in label order). Background stays 0.
pub fn scripted_gt_actions(gt: &LabelMap, cfg: &EnvConfig) -> Result<Vec<ActionMap>> {
    let (h, w) = gt.dims();
    let radius = cfg.radii.iter().copied().max().unwrap_or(1);
    let sys = build_split_system(gt, radius)?;
    let labels = sys.segment_labels().to_vec();
    let mut slot = vec![u32::MAX; u16::MAX as usize + 1];
    let capacity = 1u64 << (cfg.max_steps - 1);
    for &l in &labels {
        let used: Vec<u32> = sys
            .adjacent_labels(l, gt)
            .into_iter()
            .map(|a| slot[a as usize])
            .filter(|&s| s != u32::MAX)
            .collect();
        let k = (0u32..).find(|k| !used.contains(k)).unwrap_or(0);
        if u64::from(k) >= capacity {
            return Err(Error::InvalidParameter(format!(
                "{} steps cannot separate the adjacent segments of this ground truth",
                cfg.max_steps
            )));
        }
        slot[l as usize] = k;
    }
    let colors: Vec<u32> = gt
        .labels()
        .iter()
        .map(|&l| if l == 0 { 0 } else { 1 + 2 * slot[l as usize] })
        .collect();
    (0..cfg.max_steps)
        .map(|k| ActionMap::new(h, w, colors.iter().map(|c| ((c >> k) & 1) as u8).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::decode_instances;

    fn toy() -> (Image, LabelMap) {
        let gt = LabelMap::from_rows(&[
            [0u16, 0, 0, 0, 0, 0],
            [0, 1, 1, 2, 2, 0],
            [0, 1, 1, 2, 2, 0],
            [0, 1, 1, 2, 2, 0],
            [0, 0, 0, 0, 0, 0],
        ])
        .unwrap();
        let img = Image::new(
            5,
            6,
            1,
            gt.labels().iter().map(|&l| f64::from(l) * 0.4).collect(),
        )
        .unwrap();
        (img, gt)
    }

    fn cfg(t: usize) -> EnvConfig {
        EnvConfig {
            max_steps: t,
            radii: vec![2, 4],
            shrink: vec![ShrinkSpec { alpha: 0.8, min_size: 2 }],
            ..EnvConfig::default()
        }
    }

    #[test]
    fn reset_observation_has_zero_bit_planes() {
        let (img, gt) = toy();
        let (_, obs) = Episode::reset(img, gt, &cfg(3)).unwrap();
        assert_eq!(obs.channels, 4);
        for k in 0..3 {
            assert!(obs.bit_plane(k).iter().all(|&b| b == 0));
        }
        assert_eq!(obs.get(1, 3, 0), 0.8);
    }

    #[test]
    fn cvppp_sized_observation_shape() {
        let img = Image::new(176, 176, 1, vec![0.5; 176 * 176]).unwrap();
        let gt = LabelMap::zeros(176, 176);
        let (_, obs) = Episode::reset(img, gt, &EnvConfig::default()).unwrap();
        assert_eq!((obs.height, obs.width, obs.channels), (176, 176, 6));
        assert_eq!(obs.data.len(), 176 * 176 * 6);
    }

    #[test]
    fn reset_rejects_mismatch() {
        let (img, _) = toy();
        assert!(matches!(
            Episode::reset(img, LabelMap::zeros(4, 6), &cfg(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn single_step_episode() {
        let (img, gt) = toy();
        let (mut ep, _) = Episode::reset(img, gt, &cfg(1)).unwrap();
        let out = ep.step(&ActionMap::zeros(5, 6)).unwrap();
        assert!(out.done);
        assert_eq!(out.reward.total, out.reward.bf);
        let mean = out.reward.total.iter().sum::<f64>() / 30.0;
        assert!((out.reward.mean - mean).abs() < 1e-15);
        assert!(matches!(ep.step(&ActionMap::zeros(5, 6)), Err(Error::EpisodeFinished(1))));
    }

    #[test]
    fn scripted_episode_recovers_ground_truth() {
        let (img, gt) = toy();
        let c = cfg(3);
        let actions = scripted_gt_actions(&gt, &c).unwrap();
        let (mut ep, _) = Episode::reset(img, gt.clone(), &c).unwrap();
        for a in &actions {
            let out = ep.step(a).unwrap();
            for k in 0..3 {
                assert_eq!(out.observation.bit_plane(k), ep.state().bit_plane(k));
            }
        }
        let decoded = decode_instances(ep.state(), Connectivity::Four).unwrap();
        // Same partition up to label permutation.
        for p in 0..gt.len() {
            for q in 0..gt.len() {
                assert_eq!(
                    gt.labels()[p] == gt.labels()[q],
                    decoded.labels()[p] == decoded.labels()[q]
                );
            }
        }
        assert_eq!(ep.trajectory().len(), 3);
    }

    #[test]
    fn scripted_actions_need_enough_steps() {
        let (_, gt) = toy();
        // One step gives a single odd color; the two segments touch.
        assert!(scripted_gt_actions(&gt, &cfg(1)).is_err());
    }

    #[test]
    fn config_json_round_trip_and_rejects_unknown_keys() {
        let c = cfg(4);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(EnvConfig::from_json(&text).unwrap(), c);
        assert!(EnvConfig::from_json(r#"{"max_steps": 2, "bogus": 1}"#).is_err());
        assert!(EnvConfig::from_json(r#"{"gamma": 1.5}"#).is_err());
        let partial = EnvConfig::from_json(r#"{"max_steps": 3}"#).unwrap();
        assert_eq!(partial.radii, vec![12, 28]);
        assert_eq!(partial.shrink[0].alpha, 0.8);
    }

    #[test]
    fn episodes_are_deterministic_and_systems_static() {
        let (img, gt) = toy();
        let c = cfg(3);
        let acts: Vec<ActionMap> = (0..3)
            .map(|k| ActionMap::new(5, 6, (0..30).map(|p| ((p * 7 + k * 3) % 5 % 2) as u8).collect()).unwrap())
            .collect();
        let run = || {
            let (mut ep, _) = Episode::reset(img.clone(), gt.clone(), &c).unwrap();
            let outs: Vec<StepOutcome> = acts.iter().map(|a| ep.step(a).unwrap()).collect();
            (ep, outs)
        };
        let (ep1, o1) = run();
        let (_, o2) = run();
        assert_eq!(o1, o2);
        let (split, merge) = build_edge_systems(&gt, &c).unwrap();
        assert_eq!(ep1.split_systems(), split.as_slice());
        assert_eq!(ep1.merge_systems(), merge.as_slice());
    }
}
