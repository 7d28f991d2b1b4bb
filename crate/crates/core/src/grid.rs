//! Raster types shared by every other module: ground-truth and predicted
//! label maps, binary action maps, the T-step color state and input images.
//!
//! All rasters are stored row-major, pixel `(y, x)` at index `y * width + x`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};

/// Largest number of coloring steps a [`ColorState`] supports.
pub const MAX_COLOR_STEPS: usize = 31;

/// Neighborhood used when grouping pixels into connected regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    /// N, S, E and W neighbors.
    #[default]
    Four,
    /// All eight surrounding pixels.
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// Per-pixel instance labels, 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "label buffer has {} entries, expected {}x{}",
                labels.len(),
                height,
                width
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    /// Builds a map from nested rows; convenient in tests.
    pub fn from_rows<R: AsRef<[u16]>>(rows: &[R]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let mut labels = Vec::with_capacity(height * width);
        for row in rows {
            let row = row.as_ref();
            if row.len() != width {
                return Err(Error::ShapeMismatch("ragged rows".into()));
            }
            labels.extend_from_slice(row);
        }
        Self::new(height, width, labels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.labels[y * self.width + x]
    }

    pub fn into_labels(self) -> Vec<u16> {
        self.labels
    }

    /// Distinct nonzero labels in ascending order.
    pub fn segment_ids(&self) -> Vec<u16> {
        let mut seen = vec![false; u16::MAX as usize + 1];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..=u16::MAX).filter(|&l| seen[l as usize]).collect()
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn instance_count(&self) -> usize {
        self.segment_ids().len()
    }
}

/// One binary decision per pixel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionMap {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl ActionMap {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "action buffer has {} entries, expected {}x{}",
                bits.len(),
                height,
                width
            )));
        }
        if let Some(&b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidParameter(format!(
                "action values must be 0 or 1, found {b}"
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }
}

/// The agent's coloring after `step` of `max_steps` binary decisions.
///
/// Bit `k` of every color is the action taken at step `k`, so the bit planes
/// are a view of `colors` rather than separately stored data.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorState {
    height: usize,
    width: usize,
    step: usize,
    max_steps: usize,
    colors: Vec<u32>,
}

impl ColorState {
    pub fn new(height: usize, width: usize, max_steps: usize) -> Result<Self> {
        if max_steps == 0 || max_steps > MAX_COLOR_STEPS {
            return Err(Error::InvalidParameter(format!(
                "coloring steps must be in 1..={MAX_COLOR_STEPS}, got {max_steps}"
            )));
        }
        Ok(Self {
            height,
            width,
            step: 0,
            max_steps,
            colors: vec![0; height * width],
        })
    }

    /// Rebuilds a state from explicit bit planes (plane `k` = action at step `k`).
    pub fn from_bit_planes(
        height: usize,
        width: usize,
        max_steps: usize,
        planes: &[ActionMap],
    ) -> Result<Self> {
        let mut state = Self::new(height, width, max_steps)?;
        for plane in planes {
            state = state.apply_action(plane)?;
        }
        Ok(state)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn max_steps(&self) -> usize {
        self.max_steps
    }

    pub fn is_finished(&self) -> bool {
        self.step == self.max_steps
    }

    pub fn colors(&self) -> &[u32] {
        &self.colors
    }

    /// Bit plane `k` as 0/1 values; all zero for `k >= step`.
    pub fn bit_plane(&self, k: usize) -> Vec<u8> {
        self.colors.iter().map(|&c| ((c >> k) & 1) as u8).collect()
    }

    pub fn bit_planes(&self) -> Vec<ActionMap> {
        (0..self.max_steps)
            .map(|k| ActionMap {
                height: self.height,
                width: self.width,
                bits: self.bit_plane(k),
            })
            .collect()
    }

    /// Adds `2^step * action[v]` to every color and advances one step.
    pub fn apply_action(&self, action: &ActionMap) -> Result<Self> {
        check_dims(self.dims(), action.dims())?;
        if self.is_finished() {
            return Err(Error::EpisodeFinished(self.max_steps));
        }
        let shift = self.step;
        let colors = self
            .colors
            .iter()
            .zip(&action.bits)
            .map(|(&c, &a)| c | (u32::from(a) << shift))
            .collect();
        Ok(Self {
            height: self.height,
            width: self.width,
            step: self.step + 1,
            max_steps: self.max_steps,
            colors,
        })
    }
}

/// Input image with `channels` samples per pixel, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    samples: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, samples: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::InvalidParameter("image needs at least one channel".into()));
        }
        if samples.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "sample buffer has {} entries, expected {}x{}x{}",
                samples.len(),
                height,
                width,
                channels
            )));
        }
        if let Some(s) = samples.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::InvalidParameter(format!(
                "image sample {s} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            samples,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Interleaved samples, channel fastest.
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.samples[(y * self.width + x) * self.channels + c]
    }
}

/// Labels each maximal connected region of equal nonzero key, in raster
/// order of first appearance. Returns per-pixel region ids (0 = background)
/// and the number of regions.
fn label_regions(
    height: usize,
    width: usize,
    keys: &[u32],
    connectivity: Connectivity,
) -> (Vec<u32>, usize) {
    let mut out = vec![0u32; keys.len()];
    let mut next = 0u32;
    let mut stack = Vec::new();
    let offsets = connectivity.offsets();
    for start in 0..keys.len() {
        if keys[start] == 0 || out[start] != 0 {
            continue;
        }
        next += 1;
        let key = keys[start];
        out[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / width) as isize, (p % width) as isize);
            for &(dy, dx) in offsets {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                    continue;
                }
                let q = ny as usize * width + nx as usize;
                if out[q] == 0 && keys[q] == key {
                    out[q] = next;
                    stack.push(q);
                }
            }
        }
    }
    (out, next as usize)
}

fn regions_to_labels(height: usize, width: usize, regions: Vec<u32>, count: usize) -> Result<LabelMap> {
    if count > u16::MAX as usize {
        return Err(Error::TooManyLabels(count));
    }
    Ok(LabelMap {
        height,
        width,
        labels: regions.into_iter().map(|r| r as u16).collect(),
    })
}

/// Turns a finished coloring into instances: color 0 is background and each
/// connected region of one nonzero color becomes its own label `1..=m`.
pub fn decode_instances(state: &ColorState, connectivity: Connectivity) -> Result<LabelMap> {
    let (h, w) = state.dims();
    let (regions, count) = label_regions(h, w, state.colors(), connectivity);
    regions_to_labels(h, w, regions, count)
}

/// Splits every label into its connected components and re-indexes them.
pub fn relabel_connected(labels: &LabelMap, connectivity: Connectivity) -> Result<LabelMap> {
    let keys: Vec<u32> = labels.labels.iter().map(|&l| u32::from(l)).collect();
    let (regions, count) = label_regions(labels.height, labels.width, &keys, connectivity);
    regions_to_labels(labels.height, labels.width, regions, count)
}

/// Sends segments smaller than `min_area` pixels to background, then renumbers
/// the survivors `1..=m` in raster order of first appearance.
pub fn remove_small_segments(labels: &LabelMap, min_area: usize) -> LabelMap {
    let mut area = vec![0usize; u16::MAX as usize + 1];
    for &l in &labels.labels {
        area[l as usize] += 1;
    }
    let mut remap = vec![0u16; u16::MAX as usize + 1];
    let mut next = 0u16;
    let out = labels
        .labels
        .iter()
        .map(|&l| {
            if l == 0 || area[l as usize] < min_area {
                return 0;
            }
            if remap[l as usize] == 0 {
                next += 1;
                remap[l as usize] = next;
            }
            remap[l as usize]
        })
        .collect();
    LabelMap {
        height: labels.height,
        width: labels.width,
        labels: out,
    }
}
