//! Fully convolutional actor-critic network with hand-written backprop.
//!
//! A stack of same-padded (optionally dilated) convolutions feeds two 1x1
//! heads: 2 policy logits and 1 value per pixel. All tensors are stored
//! channel-major (`c * h * w + y * w + x`) in 64-bit floats.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Observation;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, v: &mut [f64]) {
        match self {
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
            Activation::Identity => {}
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the output.
    fn backprop(self, out: &[f64], grad: &mut [f64]) {
        match self {
            Activation::Relu => grad
                .iter_mut()
                .zip(out)
                .for_each(|(g, &y)| if y <= 0.0 { *g = 0.0 }),
            Activation::Tanh => grad.iter_mut().zip(out).for_each(|(g, &y)| *g *= 1.0 - y * y),
            Activation::Identity => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub channels: usize,
    pub dilation: usize,
    pub activation: Activation,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub input_channels: usize,
    pub layers: Vec<ConvLayerSpec>,
    /// Start from a uniform policy by zeroing the policy head.
    #[serde(default = "default_true")]
    pub zero_policy_head: bool,
}

impl NetSpec {
    /// Four 3x3 ReLU layers of 32 channels with dilations 1, 2, 4, 1.
    pub fn default_for(input_channels: usize) -> Self {
        Self::uniform(input_channels, 32, &[1, 2, 4, 1])
    }

    /// 3x3 ReLU layers of equal width, one per dilation.
    pub fn uniform(input_channels: usize, channels: usize, dilations: &[usize]) -> Self {
        Self {
            input_channels,
            layers: dilations
                .iter()
                .map(|&dilation| ConvLayerSpec {
                    kernel: 3,
                    channels,
                    dilation,
                    activation: Activation::Relu,
                })
                .collect(),
            zero_policy_head: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::InvalidParameter("network needs at least one input channel".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel == 0 || l.kernel % 2 == 0 || l.channels == 0 || l.dilation == 0 {
                return Err(Error::InvalidParameter(format!(
                    "layer {i}: kernel must be odd and channels/dilation >= 1"
                )));
            }
        }
        Ok(())
    }

    fn trunk_channels(&self) -> usize {
        self.layers.last().map_or(self.input_channels, |l| l.channels)
    }

    /// Every convolution including the two heads, in parameter order.
    fn convs(&self) -> Vec<Conv> {
        let mut out = Vec::with_capacity(self.layers.len() + 2);
        let mut offset = 0;
        let mut in_c = self.input_channels;
        let mut push = |in_c: usize, out_c: usize, k: usize, dil: usize, act: Activation| {
            let c = Conv {
                in_c,
                out_c,
                kernel: k,
                dilation: dil,
                activation: act,
                w_offset: offset,
                b_offset: offset + out_c * in_c * k * k,
            };
            offset = c.b_offset + out_c;
            out.push(c);
        };
        for l in &self.layers {
            push(in_c, l.channels, l.kernel, l.dilation, l.activation);
            in_c = l.channels;
        }
        let trunk = self.trunk_channels();
        push(trunk, 2, 1, 1, Activation::Identity);
        push(trunk, 1, 1, 1, Activation::Identity);
        out
    }

    pub fn param_count(&self) -> usize {
        self.convs().last().map_or(0, |c| c.b_offset + c.out_c)
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    in_c: usize,
    out_c: usize,
    kernel: usize,
    dilation: usize,
    activation: Activation,
    w_offset: usize,
    b_offset: usize,
}

impl Conv {
    fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.kernel * self.kernel
    }

    fn fan_in(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    /// `(dy, dx)` tap offsets in weight order.
    fn taps(&self) -> impl Iterator<Item = (isize, isize)> + '_ {
        let half = (self.kernel / 2) as isize;
        let d = self.dilation as isize;
        (0..self.kernel as isize)
            .flat_map(move |ky| (0..self.kernel as isize).map(move |kx| ((ky - half) * d, (kx - half) * d)))
    }
}

/// Valid output range `[lo, hi)` along one axis for tap offset `off`.
fn valid_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off.max(0)).max(0) as usize;
    (lo.min(len), hi.max(lo.min(len)))
}

fn conv_forward(c: &Conv, params: &[f64], input: &[f64], h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let weights = &params[c.w_offset..c.w_offset + c.weight_len()];
    let bias = &params[c.b_offset..c.b_offset + c.out_c];
    let taps: Vec<(isize, isize)> = c.taps().collect();
    let kk = taps.len();
    let mut out = vec![0.0; c.out_c * hw];
    for oc in 0..c.out_c {
        let plane = &mut out[oc * hw..(oc + 1) * hw];
        plane.fill(bias[oc]);
        for ic in 0..c.in_c {
            let src = &input[ic * hw..(ic + 1) * hw];
            for (t, &(dy, dx)) in taps.iter().enumerate() {
                let wv = weights[(oc * c.in_c + ic) * kk + t];
                if wv == 0.0 {
                    continue;
                }
                let (y0, y1) = valid_range(h, dy);
                let (x0, x1) = valid_range(w, dx);
                if x0 >= x1 {
                    continue;
                }
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let dst = &mut plane[y * w + x0..y * w + x1];
                    let s0 = (sy * w) as isize + x0 as isize + dx;
                    let s = &src[s0 as usize..s0 as usize + (x1 - x0)];
                    for (d, &v) in dst.iter_mut().zip(s) {
                        *d += wv * v;
                    }
                }
            }
        }
    }
    out
}

/// Accumulates weight and bias gradients, and optionally the input gradient.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    c: &Conv,
    params: &[f64],
    input: &[f64],
    h: usize,
    w: usize,
    d_out: &[f64],
    grad: &mut [f64],
    mut d_input: Option<&mut [f64]>,
) {
    let hw = h * w;
    let taps: Vec<(isize, isize)> = c.taps().collect();
    let kk = taps.len();
    for oc in 0..c.out_c {
        let g = &d_out[oc * hw..(oc + 1) * hw];
        grad[c.b_offset + oc] += g.iter().sum::<f64>();
        for ic in 0..c.in_c {
            let src = &input[ic * hw..(ic + 1) * hw];
            for (t, &(dy, dx)) in taps.iter().enumerate() {
                let widx = (oc * c.in_c + ic) * kk + t;
                let (y0, y1) = valid_range(h, dy);
                let (x0, x1) = valid_range(w, dx);
                if x0 >= x1 {
                    continue;
                }
                let mut acc = 0.0;
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let s0 = ((sy * w) as isize + x0 as isize + dx) as usize;
                    let gs = &g[y * w + x0..y * w + x1];
                    let ss = &src[s0..s0 + (x1 - x0)];
                    acc += gs.iter().zip(ss).map(|(a, b)| a * b).sum::<f64>();
                }
                grad[c.w_offset + widx] += acc;
                if let Some(di) = d_input.as_deref_mut() {
                    let wv = params[c.w_offset + widx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dst_plane = &mut di[ic * hw..(ic + 1) * hw];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = ((sy * w) as isize + x0 as isize + dx) as usize;
                        let gs = &g[y * w + x0..y * w + x1];
                        for (d, &v) in dst_plane[s0..s0 + (x1 - x0)].iter_mut().zip(gs) {
                            *d += wv * v;
                        }
                    }
                }
            }
        }
    }
}

/// Network parameters: one flat vector in [`NetSpec`] layer order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub spec: NetSpec,
    pub seed: u64,
    pub values: Vec<f64>,
}

impl PolicyParams {
    /// Uniform fan-in scaled initialization (He bound for ReLU layers,
    /// LeCun bound otherwise) with zero biases.
    pub fn init(spec: &NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = spec.convs();
        let mut values = vec![0.0; spec.param_count()];
        let policy_head = convs.len() - 2;
        for (i, c) in convs.iter().enumerate() {
            if i == policy_head && spec.zero_policy_head {
                continue;
            }
            let gain = if c.activation == Activation::Relu { 6.0 } else { 3.0 };
            let bound = (gain / c.fan_in() as f64).sqrt();
            for v in &mut values[c.w_offset..c.w_offset + c.weight_len()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(Self {
            spec: spec.clone(),
            seed,
            values,
        })
    }

    pub fn from_values(spec: NetSpec, seed: u64, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} parameters, got {}",
                spec.param_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        Ok(Self { spec, seed, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-pixel network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub height: usize,
    pub width: usize,
    pub logits: Vec<[f64; 2]>,
    pub log_probs: Vec<[f64; 2]>,
    pub values: Vec<f64>,
}

impl PolicyOutput {
    pub fn probs(&self, p: usize) -> [f64; 2] {
        let lp = self.log_probs[p];
        [lp[0].exp(), lp[1].exp()]
    }

    /// Policy entropy at pixel `p` in nats.
    pub fn entropy(&self, p: usize) -> f64 {
        let pr = self.probs(p);
        -(pr[0] * self.log_probs[p][0] + pr[1] * self.log_probs[p][1])
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    height: usize,
    width: usize,
    activations: Vec<Vec<f64>>,
}

fn log_softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    [z[0] - lse, z[1] - lse]
}

fn observation_to_chw(obs: &Observation) -> Vec<f64> {
    let hw = obs.height * obs.width;
    let mut out = vec![0.0; obs.channels * hw];
    for (p, px) in obs.data.chunks_exact(obs.channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            out[c * hw + p] = v;
        }
    }
    out
}

fn check_finite(values: &[f64], what: impl FnOnce() -> String) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

pub(crate) fn forward_cached(params: &PolicyParams, obs: &Observation) -> Result<(PolicyOutput, ForwardCache)> {
    if obs.channels != params.spec.input_channels {
        return Err(Error::ShapeMismatch(format!(
            "network expects {} input channels, observation has {}",
            params.spec.input_channels, obs.channels
        )));
    }
    if params.values.len() != params.spec.param_count() {
        return Err(Error::ShapeMismatch("parameter vector does not match network".into()));
    }
    let (h, w) = (obs.height, obs.width);
    let hw = h * w;
    let convs = params.spec.convs();
    let n_body = convs.len() - 2;
    let mut activations = Vec::with_capacity(n_body + 1);
    activations.push(observation_to_chw(obs));
    for (i, c) in convs[..n_body].iter().enumerate() {
        let mut out = conv_forward(c, &params.values, activations.last().expect("input"), h, w);
        c.activation.apply(&mut out);
        check_finite(&out, || format!("conv layer {i}"))?;
        activations.push(out);
    }
    let trunk = activations.last().expect("trunk");
    let z = conv_forward(&convs[n_body], &params.values, trunk, h, w);
    let v = conv_forward(&convs[n_body + 1], &params.values, trunk, h, w);
    check_finite(&z, || "policy head".into())?;
    check_finite(&v, || "value head".into())?;
    let logits: Vec<[f64; 2]> = (0..hw).map(|p| [z[p], z[hw + p]]).collect();
    let log_probs = logits.iter().map(|&l| log_softmax2(l)).collect();
    Ok((
        PolicyOutput {
            height: h,
            width: w,
            logits,
            log_probs,
            values: v,
        },
        ForwardCache {
            height: h,
            width: w,
            activations,
        },
    ))
}

/// Per-pixel action probabilities and values.
pub fn forward(params: &PolicyParams, obs: &Observation) -> Result<PolicyOutput> {
    forward_cached(params, obs).map(|(o, _)| o)
}

/// Backpropagates per-pixel logit and value gradients, accumulating into `grad`.
pub(crate) fn backward(
    params: &PolicyParams,
    cache: &ForwardCache,
    d_logits: &[[f64; 2]],
    d_values: &[f64],
    grad: &mut [f64],
) {
    let (h, w) = (cache.height, cache.width);
    let hw = h * w;
    let convs = params.spec.convs();
    let n_body = convs.len() - 2;
    let trunk = &cache.activations[n_body];
    let mut dz = vec![0.0; 2 * hw];
    for (p, g) in d_logits.iter().enumerate() {
        dz[p] = g[0];
        dz[hw + p] = g[1];
    }
    let mut d_act = vec![0.0; convs[n_body].in_c * hw];
    conv_backward(&convs[n_body], &params.values, trunk, h, w, &dz, grad, Some(&mut d_act));
    conv_backward(&convs[n_body + 1], &params.values, trunk, h, w, d_values, grad, Some(&mut d_act));
    for i in (0..n_body).rev() {
        let c = &convs[i];
        c.activation.backprop(&cache.activations[i + 1], &mut d_act);
        let input = &cache.activations[i];
        if i == 0 {
            conv_backward(c, &params.values, input, h, w, &d_act, grad, None);
        } else {
            let mut d_in = vec![0.0; c.in_c * hw];
            conv_backward(c, &params.values, input, h, w, &d_act, grad, Some(&mut d_in));
            d_act = d_in;
        }
    }
}
