//! Flat-buffer entry points for foreign callers: row-major arrays in, copied
//! row-major arrays out, JSON for configuration and reports.

use crate::env::{EnvConfig, Episode};
use crate::error::{Error, Result};
use crate::grid::{ActionMap, Image, LabelMap};
use crate::metrics::{evaluate_pair, EvalOptions};

pub const ABI_VERSION: &str = "recolor-raw-1";

/// Stable numeric error codes for foreign callers.
pub fn error_code(err: &Error) -> i32 {
    match err {
        Error::DimensionMismatch { .. } | Error::ShapeMismatch(_) => 1,
        Error::Json(_) | Error::InvalidParameter(_) => 2,
        Error::EpisodeFinished(_) => 3,
        _ => 4,
    }
}

fn expect_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!("{what} has {got} elements, expected {want}")))
    }
}

/// Reward and observation of one step as `f32` buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct RawStep {
    /// `H x W x (K + T)` after the action.
    pub observation: Vec<f32>,
    /// `H x W` total reward.
    pub reward: Vec<f32>,
    pub done: bool,
}

/// An episode driven through flat buffers.
#[derive(Debug, Clone)]
pub struct RawEpisode {
    episode: Episode,
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

impl RawEpisode {
    /// `image` is `H x W x channels` in `[0, 1]`, `gt` is `H x W`.
    pub fn reset(
        image: &[f32],
        height: usize,
        width: usize,
        channels: usize,
        gt: &[u16],
        cfg_json: &str,
    ) -> Result<(Self, Vec<f32>)> {
        let cfg = EnvConfig::from_json(cfg_json)?;
        expect_len("image", image.len(), height * width * channels)?;
        expect_len("ground truth", gt.len(), height * width)?;
        let image = Image::new(height, width, channels, image.iter().map(|&v| f64::from(v)).collect())?;
        let gt = LabelMap::new(height, width, gt.to_vec())?;
        let (episode, obs) = Episode::reset(image, gt, &cfg)?;
        Ok((Self { episode }, to_f32(&obs.data)))
    }

    /// `action` is `H x W` of 0/1.
    pub fn step(&mut self, action: &[u8]) -> Result<RawStep> {
        let (h, w) = self.episode.ground_truth().dims();
        expect_len("action", action.len(), h * w)?;
        let out = self.episode.step(&ActionMap::new(h, w, action.to_vec())?)?;
        Ok(RawStep {
            observation: to_f32(&out.observation.data),
            reward: to_f32(&out.reward.total),
            done: out.done,
        })
    }

    pub fn episode(&self) -> &Episode {
        &self.episode
    }
}

/// Single-image metric report as JSON.
pub fn metrics_json(pred: &[u16], gt: &[u16], height: usize, width: usize, options_json: &str) -> Result<String> {
    let opts: EvalOptions = if options_json.trim().is_empty() {
        EvalOptions::default()
    } else {
        serde_json::from_str(options_json)?
    };
    expect_len("prediction", pred.len(), height * width)?;
    expect_len("ground truth", gt.len(), height * width)?;
    let pred = LabelMap::new(height, width, pred.to_vec())?;
    let gt = LabelMap::new(height, width, gt.to_vec())?;
    Ok(serde_json::to_string(&evaluate_pair("raw", &pred, &gt, &opts)?)?)
}
