//! Noise schedule, conditional U-Net denoiser, guided training and ancestral sampling.
//!
//! Images live in the model domain `[-1, 1]` inside this module; public entry
//! points that take or return [`Plane`]s in `[0, 1]` say so.

use std::collections::HashMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use volrecon_grad::{Adam, Bound, Conv2d, Graph, GroupNorm, Linear, ParamStore, Real, Tensor, Var};

use crate::conditioning::{draw_drop, model_domain, ConditionConfig, ConditionEncoders};
use crate::error::{Error, Result};
use crate::inr::{inr_loss_graph_subset, infer_prior, prior_window, InrField, PriorMode, PriorOptions};
use crate::volume::{slice_depth, Plane, ProjectionStack, Volume};

/// Largest `gamma` accepted by the sampler; larger values are clamped.
pub const MAX_GAMMA: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Uniformly spaced timesteps visited by the sampler.
    pub inference_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { train_steps: 1000, beta_start: 1e-4, beta_end: 2e-2, inference_steps: 100 }
    }
}

/// `beta_t` and `alpha_bar_t` for `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("betas must be non-empty and inside (0, 1)".into()));
        }
        let mut acc = 1.0;
        let alphas_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alphas_bar })
    }

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let betas = (0..steps)
            .map(|i| {
                let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                beta_start + f * (beta_end - beta_start)
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::linear(cfg.train_steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_bar[t - 1]
        }
    }

    /// Descending timesteps `T, ..., t_1` spaced uniformly over `1..=T`.
    pub fn inference_timesteps(&self, steps: usize) -> Vec<usize> {
        let total = self.len();
        let steps = steps.clamp(1, total);
        let mut ts: Vec<usize> = (1..=steps).rev().map(|i| ((i * total) as f64 / steps as f64).round() as usize).collect();
        ts.dedup();
        ts
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::Range(format!("timestep {t} outside [1, {}]", self.len())));
        }
        Ok(())
    }
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_noise(x0: &Plane, t: usize, sched: &NoiseSchedule, eps: &Plane) -> Result<Plane> {
    sched.check_t(t)?;
    if !x0.same_shape(eps) {
        return Err(Error::Shape("x0 and eps shapes differ".into()));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data.iter().zip(&eps.data).map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32).collect();
    Plane::new(x0.height, x0.width, data)
}

/// `gamma m + (1 - gamma) x_t`, pixelwise.
pub fn apply_prior(x_t: &Plane, m_inr: &Plane, gamma: f64) -> Result<Plane> {
    if !x_t.same_shape(m_inr) {
        return Err(Error::Shape("x_t and prior shapes differ".into()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Range(format!("gamma {gamma} outside [0, 1]")));
    }
    Ok(Plane::new(x_t.height, x_t.width, mix(&x_t.data, &m_inr.data, gamma))?)
}

fn mix(x: &[f32], m: &[f32], gamma: f64) -> Vec<f32> {
    if gamma == 0.0 {
        return x.to_vec();
    }
    x.iter().zip(m).map(|(&xv, &mv)| (gamma * mv as f64 + (1.0 - gamma) * xv as f64) as f32).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionTarget {
    #[default]
    Epsilon,
    X0,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Condition projected and added at every residual block output.
    #[default]
    Addition,
    /// Condition blocks attended to as tokens at every residual block.
    CrossAttention,
    /// Condition ignored.
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InrRegime {
    /// INR parameters are constants during diffusion training.
    #[default]
    Freeze,
    /// INR parameters receive gradients from the denoising loss.
    Trainable,
    /// As `trainable`, plus the projection loss of the INR.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub w: f64,
    pub gamma: f64,
    pub p_uncond: f64,
    pub prediction_target: PredictionTarget,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { w: 1.0, gamma: 0.1, p_uncond: 0.1, prediction_target: PredictionTarget::Epsilon }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(Error::Config(format!("guidance w {} must be >= 0", self.w)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} must lie in [0, 1)", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!("p_uncond {} outside [0, 1]", self.p_uncond)));
        }
        Ok(())
    }

    pub fn effective_gamma(&self) -> f64 {
        self.gamma.min(MAX_GAMMA)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub base_channels: usize,
    /// Channel multiplier per resolution level; each level after the first halves H and W.
    pub channel_mult: Vec<usize>,
    pub time_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { base_channels: 16, channel_mult: vec![1, 2, 2], time_dim: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub guidance: GuidanceConfig,
    pub schedule: ScheduleConfig,
    pub unet: UNetConfig,
    pub condition: ConditionConfig,
    pub fusion: FusionMode,
    pub prior: PriorOptions,
    /// Use `x_{t-1} = x_t - eps` instead of the ancestral update.
    pub literal_alg2: bool,
    /// Noise estimate is `sqrt(1 - alpha_bar_t) x_t` plus the network output (epsilon target only).
    pub input_skip: bool,
    /// Clamp the implied clean image to `[-1, 1]` before each ancestral step.
    pub clip_x0: bool,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            guidance: GuidanceConfig::default(),
            schedule: ScheduleConfig::default(),
            unet: UNetConfig::default(),
            condition: ConditionConfig::default(),
            fusion: FusionMode::Addition,
            prior: PriorOptions::default(),
            literal_alg2: false,
            input_skip: true,
            clip_x0: true,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        if self.schedule.inference_steps == 0 || self.schedule.inference_steps > self.schedule.train_steps {
            return Err(Error::Config(format!(
                "inference_steps {} must lie in [1, {}]",
                self.schedule.inference_steps, self.schedule.train_steps
            )));
        }
        if self.unet.base_channels == 0 || self.unet.channel_mult.is_empty() || self.unet.channel_mult.contains(&0) {
            return Err(Error::Config("unet widths must be positive".into()));
        }
        if self.unet.time_dim < 2 || self.unet.time_dim % 2 != 0 {
            return Err(Error::Config("unet time_dim must be even and >= 2".into()));
        }
        match self.prior.mode {
            PriorMode::Off | PriorMode::ConditionConcat if self.guidance.gamma > 0.0 => Err(Error::Config(format!(
                "prior mode {:?} does not interpolate the sampler input; gamma must be 0",
                self.prior.mode
            ))),
            _ => Ok(()),
        }
    }

    pub fn needs_inr(&self) -> bool {
        self.prior.mode != PriorMode::Off
    }

    /// The prior is blended into the network input.
    pub fn prior_in_input(&self) -> bool {
        self.needs_inr() && self.prior.mode != PriorMode::ConditionConcat && self.guidance.gamma > 0.0
    }

    fn effective_condition(&self) -> ConditionConfig {
        ConditionConfig { prior_block: self.prior.mode == PriorMode::ConditionConcat, ..self.condition.clone() }
    }
}

fn groups_for(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap()
}

#[derive(Clone, Debug)]
struct CrossAttention {
    q: Linear,
    k: Vec<Linear>,
    v: Vec<Linear>,
    out: Linear,
    channels: usize,
    blocks: Vec<usize>,
}

impl CrossAttention {
    fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, channels: usize, blocks: &[usize], rng: &mut R) -> Self {
        let q = Linear::new(store, &format!("{name}.q"), channels, channels, false, rng);
        let k = blocks
            .iter()
            .enumerate()
            .map(|(i, &d)| Linear::new(store, &format!("{name}.k{i}"), d, channels, false, rng))
            .collect();
        let v = blocks
            .iter()
            .enumerate()
            .map(|(i, &d)| Linear::new(store, &format!("{name}.v{i}"), d, channels, false, rng))
            .collect();
        let out = Linear::zeros(store, &format!("{name}.out"), channels, channels);
        Self { q, k, v, out, channels, blocks: blocks.to_vec() }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bound<'_, T>, h: Var, cond: Var) -> Var {
        let s = g.shape(h).to_vec();
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let flat = g.reshape(h, &[b, c, hw]);
        let seq = g.transpose12(flat);
        let q = self.q.forward(g, p, seq);
        let (mut keys, mut values, mut offset) = (Vec::new(), Vec::new(), 0);
        for (i, &len) in self.blocks.iter().enumerate() {
            let block = g.narrow(cond, 1, offset, len);
            offset += len;
            let k = self.k[i].forward(g, p, block);
            let v = self.v[i].forward(g, p, block);
            keys.push(g.reshape(k, &[b, 1, c]));
            values.push(g.reshape(v, &[b, 1, c]));
        }
        let keys = g.concat(&keys, 1);
        let values = g.concat(&values, 1);
        let scores = g.bmm(q, keys, false, true);
        let scores = g.scale(scores, 1.0 / (self.channels as f64).sqrt());
        let attn = g.softmax_last(scores);
        let o = g.bmm(attn, values, false, false);
        let o = self.out.forward(g, p, o);
        let o = g.transpose12(o);
        let o = g.reshape(o, &s);
        g.add(h, o)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    gn2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    t_proj: Linear,
    c_proj: Option<Linear>,
    attn: Option<CrossAttention>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        time_dim: usize,
        fusion: FusionMode,
        blocks: &[usize],
        rng: &mut R,
    ) -> Self {
        let cond_dim: usize = blocks.iter().sum();
        Self {
            gn1: GroupNorm::new(store, &format!("{name}.gn1"), cin, groups_for(cin)),
            conv1: Conv2d::same3(store, &format!("{name}.conv1"), cin, cout, rng),
            gn2: GroupNorm::new(store, &format!("{name}.gn2"), cout, groups_for(cout)),
            conv2: Conv2d::same3(store, &format!("{name}.conv2"), cout, cout, rng),
            skip: (cin != cout).then(|| Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1, 0, rng)),
            t_proj: Linear::new(store, &format!("{name}.t_proj"), time_dim, cout, true, rng),
            c_proj: (fusion == FusionMode::Addition)
                .then(|| Linear::new(store, &format!("{name}.c_proj"), cond_dim, cout, false, rng)),
            attn: (fusion == FusionMode::CrossAttention)
                .then(|| CrossAttention::new(store, &format!("{name}.attn"), cout, blocks, rng)),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bound<'_, T>, x: Var, temb: Var, cond: Option<Var>) -> Var {
        let h = self.gn1.forward(g, p, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, p, h);
        let h = self.gn2.forward(g, p, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h);
        let skip = match &self.skip {
            Some(s) => s.forward(g, p, x),
            None => x,
        };
        let mut out = g.add(skip, h);
        let mut inject = self.t_proj.forward(g, p, temb);
        if let (Some(cp), Some(c)) = (&self.c_proj, cond) {
            let cv = cp.forward(g, p, c);
            inject = g.add(inject, cv);
        }
        out = g.add_channel(out, inject);
        if let (Some(a), Some(c)) = (&self.attn, cond) {
            out = a.forward(g, p, out, c);
        }
        out
    }
}

#[derive(Clone, Debug)]
struct UNet {
    in_conv: Conv2d,
    time: [Linear; 2],
    down: Vec<ResBlock>,
    downsample: Vec<Conv2d>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    out_conv: Conv2d,
    time_dim: usize,
}

impl UNet {
    fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &UNetConfig,
        fusion: FusionMode,
        blocks: &[usize],
        rng: &mut R,
    ) -> Self {
        let td = cfg.time_dim;
        let ch: Vec<usize> = cfg.channel_mult.iter().map(|m| m * cfg.base_channels).collect();
        let levels = ch.len();
        let in_conv = Conv2d::same3(store, "unet.in", 1, ch[0], rng);
        let time = [
            Linear::new(store, "unet.time.0", td, td, true, rng),
            Linear::new(store, "unet.time.1", td, td, true, rng),
        ];
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        for l in 0..levels {
            let cin = if l == 0 { ch[0] } else { ch[l - 1] };
            down.push(ResBlock::new(store, &format!("unet.down{l}"), cin, ch[l], td, fusion, blocks, rng));
            if l + 1 < levels {
                downsample.push(Conv2d::new(store, &format!("unet.downsample{l}"), ch[l], ch[l], 3, 2, 1, rng));
            }
        }
        let last = ch[levels - 1];
        let mid = ResBlock::new(store, "unet.mid", last, last, td, fusion, blocks, rng);
        let mut up = Vec::new();
        for l in 0..levels {
            let prev = if l + 1 == levels { last } else { ch[l + 1] };
            up.push(ResBlock::new(store, &format!("unet.up{l}"), prev + ch[l], ch[l], td, fusion, blocks, rng));
        }
        let out_conv = Conv2d::same3(store, "unet.out", ch[0], 1, rng);
        for id in [out_conv.w, out_conv.b] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        Self { in_conv, time, down, downsample, mid, up, out_conv, time_dim: td }
    }

    fn levels(&self) -> usize {
        self.down.len()
    }

    fn time_embedding<T: Real>(&self, ts: &[usize]) -> Tensor<T> {
        let half = self.time_dim / 2;
        let mut data = Vec::with_capacity(ts.len() * self.time_dim);
        for &t in ts {
            let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp() * t as f64);
            let (s, c): (Vec<f64>, Vec<f64>) = freqs.map(|a| (a.sin(), a.cos())).unzip();
            data.extend(s.into_iter().chain(c).map(T::lit));
        }
        Tensor::new(&[ts.len(), self.time_dim], data).unwrap()
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: Bound<'_, T>, x: Var, ts: &[usize], cond: Option<Var>) -> Var {
        let te = g.constant(self.time_embedding(ts));
        let te = self.time[0].forward(g, p, te);
        let te = g.silu(te);
        let te = self.time[1].forward(g, p, te);
        let temb = g.silu(te);
        let mut h = self.in_conv.forward(g, p, x);
        let mut skips = Vec::new();
        for l in 0..self.levels() {
            h = self.down[l].forward(g, p, h, temb, cond);
            skips.push(h);
            if l + 1 < self.levels() {
                h = self.downsample[l].forward(g, p, h);
            }
        }
        h = self.mid.forward(g, p, h, temb, cond);
        for l in (0..self.levels()).rev() {
            h = g.concat(&[h, skips[l]], 1);
            h = self.up[l].forward(g, p, h, temb, cond);
            if l > 0 {
                h = g.upsample2x(h);
            }
        }
        let h = g.silu(h);
        self.out_conv.forward(g, p, h)
    }
}

/// Denoiser, condition encoders and schedule sharing one parameter store.
#[derive(Debug)]
pub struct DiffusionModel<T> {
    pub config: DiffusionConfig,
    pub params: ParamStore<T>,
    pub encoders: ConditionEncoders,
    pub schedule: NoiseSchedule,
    unet: UNet,
}

impl<T: Real> Clone for DiffusionModel<T> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            encoders: self.encoders.clone(),
            schedule: self.schedule.clone(),
            unet: self.unet.clone(),
        }
    }
}

/// One training mini-batch. Images are in `[0, 1]`; `eps` is `[B * H * W]` unit normals.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub x0: Vec<Plane>,
    pub projections: Vec<Plane>,
    pub z: Vec<f64>,
    /// Precomputed priors, used when the INR is frozen.
    pub priors: Option<Vec<Plane>>,
    pub t: Vec<usize>,
    pub eps: Vec<f32>,
    pub drop: Vec<bool>,
}

/// Source of the INR prior inside a training graph.
pub enum PriorSource<'a, T> {
    None,
    /// Priors precomputed from a frozen field (taken from the batch).
    Fixed,
    /// Priors rendered in-graph from `field`, one window per sample.
    Field { field: &'a InrField<T>, trainable: bool, windows: &'a [(Vec<f64>, Vec<f64>)] },
}

impl<T: Real> DiffusionModel<T> {
    pub fn new(config: &DiffusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let cond_cfg = config.effective_condition();
        let encoders = ConditionEncoders::new(&mut params, &cond_cfg, seed.wrapping_add(17), &mut rng)?;
        let unet = UNet::new(&mut params, &config.unet, config.fusion, &cond_cfg.blocks(), &mut rng);
        let schedule = NoiseSchedule::from_config(&config.schedule)?;
        Ok(Self { config: config.clone(), params, encoders, schedule, unet })
    }

    /// Overwrites parameters by name from `store`, checking shapes.
    pub fn load_params(&mut self, store: &ParamStore<T>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Shape(format!("checkpoint has {} tensors, model {}", store.len(), self.params.len())));
        }
        for (name, t) in store.iter() {
            let id = self.params.by_name(name).ok_or_else(|| Error::Shape(format!("unknown parameter {name}")))?;
            if self.params.get(id).shape() != t.shape() {
                return Err(Error::Shape(format!("parameter {name} shape {:?}", t.shape())));
            }
            *self.params.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> DiffusionModel<U> {
        DiffusionModel {
            config: self.config.clone(),
            params: self.params.cast(),
            encoders: self.encoders.clone(),
            schedule: self.schedule.clone(),
            unet: self.unet.clone(),
        }
    }

    pub fn check_image(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << (self.unet.levels() - 1);
        if h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!("{h}x{w} image not divisible by {f}")));
        }
        if h < 16 || w < 16 {
            return Err(Error::Shape(format!("{h}x{w} image smaller than the 16x16 encoder minimum")));
        }
        Ok(())
    }

    /// Network output for model-domain input `x [B, 1, H, W]`.
    pub fn predict(&self, g: &mut Graph<T>, p: Bound<'_, T>, x: Var, ts: &[usize], cond: Option<Var>) -> Var {
        let cond = if self.config.fusion == FusionMode::None { None } else { cond };
        self.unet.forward(g, p, x, ts, cond)
    }

    fn skip_active(&self) -> bool {
        self.config.input_skip && self.config.guidance.prediction_target == PredictionTarget::Epsilon
    }

    /// Weight of the chain state added to the network output, `sqrt(1 - alpha_bar_t)` when enabled.
    pub fn skip_scale(&self, t: usize) -> f64 {
        if self.skip_active() {
            (1.0 - self.schedule.alpha_bar(t)).sqrt()
        } else {
            0.0
        }
    }

    /// Denoising loss of one batch as a graph node.
    pub fn loss_graph(&self, g: &mut Graph<T>, trainable: bool, batch: &TrainBatch, prior: &PriorSource<'_, T>) -> Var {
        let p = Bound { store: &self.params, trainable };
        let b = batch.x0.len();
        let (h, w) = (batch.x0[0].height, batch.x0[0].width);
        let x0_refs: Vec<&Plane> = batch.x0.iter().collect();
        let x0 = model_domain::<T>(&x0_refs);
        let mut xt = Vec::with_capacity(b * h * w);
        for (i, &t) in batch.t.iter().enumerate() {
            let ab = self.schedule.alpha_bar(t);
            let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
            for j in 0..h * w {
                let x = x0.data()[i * h * w + j].as_f64();
                xt.push(T::lit(sa * x + sb * batch.eps[i * h * w + j] as f64));
            }
        }
        let skip: Vec<T> = batch
            .t
            .iter()
            .enumerate()
            .flat_map(|(i, &t)| {
                let k = self.skip_scale(t);
                xt[i * h * w..(i + 1) * h * w].iter().map(move |&v| v * T::lit(k))
            })
            .collect();
        let xt = Tensor::new(&[b, 1, h, w], xt).unwrap();
        let prior_var = match prior {
            PriorSource::None => None,
            PriorSource::Fixed => {
                let refs: Vec<&Plane> = batch.priors.as_ref().expect("batch priors").iter().collect();
                Some(g.constant(model_domain(&refs)))
            }
            PriorSource::Field { field, trainable, windows } => {
                let mut rows = Vec::with_capacity(b);
                for (depths, weights) in windows.iter() {
                    let feats = g.constant(field.slice_features(depths, h, w));
                    let y = field.forward(g, field.bound(*trainable), feats);
                    let y = g.reshape(y, &[depths.len(), h * w]);
                    let m = g.weighted_sum_axis(y, 0, weights);
                    rows.push(g.reshape(m, &[1, 1, h, w]));
                }
                let m = g.concat(&rows, 0);
                Some(g.affine(m, 2.0, -1.0))
            }
        };
        let gamma = self.config.guidance.effective_gamma();
        let x_in = match prior_var {
            Some(m) if self.config.prior_in_input() => {
                let xt = g.constant(xt.map(|v| v * T::lit(1.0 - gamma)));
                let m = g.scale(m, gamma);
                g.add(m, xt)
            }
            _ => g.constant(xt),
        };
        let proj_refs: Vec<&Plane> = batch.projections.iter().collect();
        let proj = g.constant(model_domain(&proj_refs));
        let concat_prior = if self.encoders.config.prior_block { prior_var } else { None };
        let cond = self.encoders.encode(g, p, proj, &batch.z, concat_prior);
        let cond = self.encoders.apply_drop(g, p, cond, &batch.drop);
        let mut out = self.predict(g, p, x_in, &batch.t, Some(cond));
        if self.skip_active() {
            let skip = g.constant(Tensor::new(&[b, 1, h, w], skip).unwrap());
            out = g.add(out, skip);
        }
        let target = match self.config.guidance.prediction_target {
            PredictionTarget::Epsilon => {
                Tensor::new(&[b, 1, h, w], batch.eps.iter().map(|&e| T::lit(e as f64)).collect()).unwrap()
            }
            PredictionTarget::X0 => x0,
        };
        let target = g.constant(target);
        g.mse(out, target)
    }

    /// Condition rows `[B, dim]` for `[0, 1]` projections (and priors when concatenated).
    pub fn conditions(&self, projections: &[&Plane], zs: &[f64], priors: Option<&[&Plane]>) -> Tensor<T> {
        let mut g = Graph::new();
        let p = Bound::frozen(&self.params);
        let proj = g.constant(model_domain(projections));
        let prior = if self.encoders.config.prior_block { priors.map(|pr| g.constant(model_domain(pr))) } else { None };
        let c = self.encoders.encode(&mut g, p, proj, zs, prior);
        g.value(c).clone()
    }

    /// Learned null-condition token repeated `b` times.
    pub fn null_rows(&self, b: usize) -> Tensor<T> {
        let token = self.params.get(self.encoders.null_token).data();
        let data = (0..b).flat_map(|_| token.iter().copied()).collect();
        Tensor::new(&[b, token.len()], data).unwrap()
    }

    /// Raw network output on a model-domain batch.
    fn network(&self, x: &Tensor<T>, t: usize, cond: &Tensor<T>) -> Tensor<T> {
        let mut g = Graph::new();
        let p = Bound::frozen(&self.params);
        let xv = g.constant(x.clone());
        let cv = g.constant(cond.clone());
        let ts = vec![t; x.shape()[0]];
        let out = self.predict(&mut g, p, xv, &ts, Some(cv));
        g.value(out).clone()
    }

    /// Network output converted to a noise estimate for chain state `x_t`.
    pub fn eps_estimate(&self, x_in: &Tensor<T>, x_t: &[f32], t: usize, cond: &Tensor<T>) -> Vec<f64> {
        let out = self.network(x_in, t, cond);
        match self.config.guidance.prediction_target {
            PredictionTarget::Epsilon => {
                let k = self.skip_scale(t);
                out.data().iter().zip(x_t).map(|(v, &xt)| v.as_f64() + k * xt as f64).collect()
            }
            PredictionTarget::X0 => {
                let ab = self.schedule.alpha_bar(t);
                let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
                out.data().iter().zip(x_t).map(|(x0, &xt)| (xt as f64 - sa * x0.as_f64()) / sb).collect()
            }
        }
    }

    /// Guided estimate `(1 + w) eps_c - w eps_u`; `w = 0` returns the conditional branch.
    pub fn guided_eps(&self, x_in: &[f32], x_t: &[f32], shape: [usize; 4], t: usize, cond: &Tensor<T>, w: f64) -> Vec<f64> {
        let xin = Tensor::new(&shape, x_in.iter().map(|&v| T::lit(v as f64)).collect()).unwrap();
        let eps_c = self.eps_estimate(&xin, x_t, t, cond);
        if w == 0.0 {
            return eps_c;
        }
        let eps_u = self.eps_estimate(&xin, x_t, t, &self.null_rows(shape[0]));
        eps_c.iter().zip(&eps_u).map(|(c, u)| (1.0 + w) * c - w * u).collect()
    }

    /// One reverse step from `t` to `t_prev`, drawing noise from each sample's rng.
    fn reverse_step(&self, x: &mut [f32], eps: &[f64], t: usize, t_prev: usize, rngs: &mut [ChaCha8Rng]) {
        if self.config.literal_alg2 {
            for (xv, e) in x.iter_mut().zip(eps) {
                *xv = (*xv as f64 - e) as f32;
            }
            return;
        }
        let (ab, ab_prev) = (self.schedule.alpha_bar(t), self.schedule.alpha_bar(t_prev));
        let beta = 1.0 - ab / ab_prev;
        let sigma = if t_prev == 0 { 0.0 } else { beta.sqrt() };
        let (c0, c1) = (ab_prev.sqrt() * beta / (1.0 - ab), (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab));
        let (coef, inv) = (beta / (1.0 - ab).sqrt(), 1.0 / (1.0 - beta).sqrt());
        let per = x.len() / rngs.len();
        for (i, rng) in rngs.iter_mut().enumerate() {
            for j in i * per..(i + 1) * per {
                let xt = x[j] as f64;
                let mut v = if self.config.clip_x0 {
                    let x0 = ((xt - (1.0 - ab).sqrt() * eps[j]) / ab.sqrt()).clamp(-1.0, 1.0);
                    c0 * x0 + c1 * xt
                } else {
                    inv * (xt - coef * eps[j])
                };
                if sigma > 0.0 {
                    let xi: f64 = rng.sample(StandardNormal);
                    v += sigma * xi;
                }
                x[j] = v as f32;
            }
        }
    }

    /// Samples one slice per request. Projections and priors are `[0, 1]`
    /// images; `rngs[i]` drives request `i` only.
    pub fn sample_batch(
        &self,
        projections: &[&Plane],
        zs: &[f64],
        priors: Option<&[&Plane]>,
        rngs: &mut [ChaCha8Rng],
        mut trace: Option<&mut Vec<Vec<f32>>>,
    ) -> Result<Vec<Plane>> {
        let b = projections.len();
        if b == 0 || zs.len() != b || rngs.len() != b || priors.is_some_and(|p| p.len() != b) {
            return Err(Error::InvalidArgument("sample_batch inputs must have matching non-zero lengths".into()));
        }
        if self.config.needs_inr() && priors.is_none() {
            return Err(Error::InvalidArgument(format!("prior mode {:?} needs INR priors", self.config.prior.mode)));
        }
        let (h, w) = (projections[0].height, projections[0].width);
        self.check_image(h, w)?;
        let shape = [b, 1, h, w];
        let cond = self.conditions(projections, zs, priors);
        let gamma = if self.config.prior_in_input() { self.config.guidance.effective_gamma() } else { 0.0 };
        let prior_md: Option<Vec<f32>> =
            priors.filter(|_| gamma > 0.0).map(|ps| ps.iter().flat_map(|p| p.data.iter().map(|&v| 2.0 * v - 1.0)).collect());
        let mut x: Vec<f32> = Vec::with_capacity(b * h * w);
        for rng in rngs.iter_mut() {
            x.extend((0..h * w).map(|_| rng.sample::<f32, _>(StandardNormal)));
        }
        let steps = self.schedule.inference_timesteps(self.config.schedule.inference_steps);
        for (i, &t) in steps.iter().enumerate() {
            let t_prev = steps.get(i + 1).copied().unwrap_or(0);
            let x_in = match &prior_md {
                Some(m) => mix(&x, m, gamma),
                None => x.clone(),
            };
            let eps = self.guided_eps(&x_in, &x, shape, t, &cond, self.config.guidance.w);
            self.reverse_step(&mut x, &eps, t, t_prev, rngs);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("sampler state at t={t}")));
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(x.clone());
            }
        }
        x.chunks(h * w)
            .map(|c| Plane::new(h, w, c.iter().map(|&v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect()))
            .collect()
    }

    /// One guided sample at depth `z` from the `[0, 1]` projection and optional prior.
    pub fn sample_slice(&self, projection: &Plane, z: f64, prior: Option<&Plane>, rng: &mut ChaCha8Rng) -> Result<Plane> {
        let priors = prior.map(|p| vec![p]);
        let mut rngs = [rng.clone()];
        let out = self.sample_batch(&[projection], &[z], priors.as_deref(), &mut rngs, None)?;
        *rng = rngs[0].clone();
        Ok(out.into_iter().next().unwrap())
    }

    /// Classifier-free-guided ancestral sampler without any prior handling.
    pub fn sample_plain(&self, projection: &Plane, z: f64, rng: &mut ChaCha8Rng) -> Result<Plane> {
        let (h, w) = (projection.height, projection.width);
        self.check_image(h, w)?;
        let cond = self.conditions(&[projection], &[z], None);
        let mut x: Vec<f32> = (0..h * w).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let steps = self.schedule.inference_timesteps(self.config.schedule.inference_steps);
        for (i, &t) in steps.iter().enumerate() {
            let t_prev = steps.get(i + 1).copied().unwrap_or(0);
            let eps = self.guided_eps(&x, &x, [1, 1, h, w], t, &cond, self.config.guidance.w);
            self.reverse_step(&mut x, &eps, t, t_prev, std::slice::from_mut(rng));
        }
        Plane::new(h, w, x.iter().map(|&v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect())
    }
}

/// Independent stream for output slice `k`.
pub fn slice_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64 + 1);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub inr_regime: InrRegime,
    /// Random flips and transposes of each training sample (frozen INR only).
    pub augment: bool,
    /// Train on random square crops of this size (frozen INR only).
    pub crop: Option<usize>,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self { epochs: 300, batch: 8, learning_rate: 1e-3, seed: 0, inr_regime: InrRegime::Freeze, augment: false, crop: None }
    }
}

/// One of the eight symmetries of the square: bit 0 flips rows, bit 1 flips
/// columns, bit 2 transposes (square images only).
pub fn dihedral(p: &Plane, d: u8) -> Plane {
    let (h, w) = (p.height, p.width);
    let transpose = d & 4 != 0 && h == w;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (mut sy, mut sx) = if transpose { (x, y) } else { (y, x) };
            if d & 1 != 0 {
                sy = h - 1 - sy;
            }
            if d & 2 != 0 {
                sx = w - 1 - sx;
            }
            out.push(p.data[sy * w + sx]);
        }
    }
    Plane { height: h, width: w, data: out }
}

fn crop(p: &Plane, y0: usize, x0: usize, size: usize) -> Plane {
    let data = (y0..y0 + size).flat_map(|y| p.data[y * p.width + x0..y * p.width + x0 + size].iter().copied()).collect();
    Plane { height: size, width: size, data }
}

#[derive(Clone, Debug)]
pub struct DiffusionTrainOutcome {
    /// Mean step loss per epoch.
    pub loss_history: Vec<f64>,
    pub steps: usize,
}

/// Single optimiser step on `batch`; returns the loss before the update.
pub fn train_step(
    model: &mut DiffusionModel<f32>,
    opt: &mut Adam,
    batch: &TrainBatch,
    inr: Option<&InrField<f32>>,
) -> Result<f64> {
    let mut g = Graph::new();
    let source = if model.config.needs_inr() {
        if batch.priors.is_none() {
            return Err(Error::InvalidArgument("frozen-INR training needs precomputed priors".into()));
        }
        PriorSource::Fixed
    } else {
        PriorSource::None
    };
    let _ = inr;
    let loss = model.loss_graph(&mut g, true, batch, &source);
    let value = g.value(loss).item() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("diffusion loss {value} at t={:?}", batch.t)));
    }
    let grads = g.backward(loss);
    opt.step(&mut model.params, &grads);
    Ok(value)
}

/// Trains on the slices of `truth` with projections from `stack`.
pub fn train_diffusion(
    model: &mut DiffusionModel<f32>,
    mut inr: Option<&mut InrField<f32>>,
    truth: &Volume,
    stack: &ProjectionStack,
    cfg: &DiffusionTrainConfig,
    inr_learning_rate: f64,
) -> Result<DiffusionTrainOutcome> {
    if cfg.batch == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("diffusion batch and learning_rate must be positive".into()));
    }
    if truth.depth() != stack.source_depth() || truth.height() != stack.height() || truth.width() != stack.width() {
        return Err(Error::Shape("training volume does not match its projection stack".into()));
    }
    let needs_inr = model.config.needs_inr();
    if needs_inr && inr.is_none() {
        return Err(Error::InvalidArgument(format!("prior mode {:?} needs a trained INR", model.config.prior.mode)));
    }
    let [depth, h, w] = truth.dims();
    model.check_image(h, w)?;
    let n = stack.step_length();
    let opts = model.config.prior;
    let regime = if needs_inr { cfg.inr_regime } else { InrRegime::Freeze };
    let frozen_priors: Option<Vec<Plane>> = match (&inr, regime) {
        (Some(f), InrRegime::Freeze) => Some(
            (0..depth)
                .map(|k| infer_prior(&**f, slice_depth(k, depth).value(), n, depth, h, w, opts))
                .collect::<Result<_>>()?,
        ),
        _ => None,
    };
    let windows: Vec<(Vec<f64>, Vec<f64>)> = if needs_inr {
        (0..depth).map(|k| prior_window(slice_depth(k, depth).value(), n, depth, opts)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut inr_opt = Adam::new(inr_learning_rate);
    let mut order: Vec<usize> = (0..depth).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let total = model.schedule.len();
    let p_uncond = model.config.guidance.p_uncond;
    let mut steps = 0;
    let fixed = regime == InrRegime::Freeze;
    if let Some(c) = cfg.crop.filter(|_| fixed) {
        if c > h || c > w {
            return Err(Error::Config(format!("crop {c} exceeds image {h}x{w}")));
        }
        model.check_image(c, c)?;
    }
    let (bh, bw) = match cfg.crop.filter(|_| fixed) {
        Some(c) => (c, c),
        None => (h, w),
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0);
        for chunk in order.chunks(cfg.batch) {
            let mut batch = TrainBatch {
                x0: chunk.iter().map(|&k| truth.plane(k)).collect(),
                projections: chunk.iter().map(|&k| stack.projections()[stack.index_for_slice(k)].clone()).collect(),
                z: chunk.iter().map(|&k| slice_depth(k, depth).value()).collect(),
                priors: frozen_priors.as_ref().map(|p| chunk.iter().map(|&k| p[k].clone()).collect()),
                t: Vec::with_capacity(chunk.len()),
                eps: Vec::with_capacity(chunk.len() * h * w),
                drop: Vec::with_capacity(chunk.len()),
            };
            if fixed && (cfg.augment || cfg.crop.is_some()) {
                for i in 0..chunk.len() {
                    let d = if cfg.augment { rng.gen_range(0..8u8) } else { 0 };
                    let window = cfg.crop.map(|c| (rng.gen_range(0..=h - c), rng.gen_range(0..=w - c), c));
                    let f = |p: &Plane| match window {
                        Some((y0, x0, c)) => dihedral(&crop(p, y0, x0, c), d),
                        None => dihedral(p, d),
                    };
                    batch.x0[i] = f(&batch.x0[i]);
                    batch.projections[i] = f(&batch.projections[i]);
                    if let Some(pr) = batch.priors.as_mut() {
                        pr[i] = f(&pr[i]);
                    }
                }
            }
            for _ in chunk {
                batch.t.push(rng.gen_range(1..=total));
                batch.eps.extend((0..bh * bw).map(|_| rng.sample::<f32, _>(StandardNormal)));
                batch.drop.push(draw_drop(p_uncond, &mut rng)?);
            }
            let loss = match (regime, inr.as_deref_mut()) {
                (InrRegime::Freeze, field) => train_step(model, &mut opt, &batch, field.map(|f| &*f))?,
                (_, Some(field)) => {
                    let win: Vec<(Vec<f64>, Vec<f64>)> = chunk.iter().map(|&k| windows[k].clone()).collect();
                    let mut g = Graph::new();
                    let source = PriorSource::Field { field: &*field, trainable: true, windows: &win };
                    let mut loss = model.loss_graph(&mut g, true, &batch, &source);
                    if regime == InrRegime::Joint {
                        let i = rng.gen_range(0..stack.len());
                        let l = inr_loss_graph_subset(&mut g, field, stack, &[i]);
                        loss = g.add(loss, l);
                    }
                    let value = g.value(loss).item() as f64;
                    if !value.is_finite() {
                        return Err(Error::NonFinite(format!("diffusion loss {value} at epoch {epoch}")));
                    }
                    let grads = g.backward(loss);
                    opt.step(&mut model.params, &grads);
                    inr_opt.step(&mut field.params, &grads);
                    value
                }
                (_, None) => unreachable!("checked above"),
            };
            sum += loss;
            count += 1;
            steps += 1;
        }
        let mean = sum / count as f64;
        history.push(mean);
        if epoch % 25 == 0 || epoch + 1 == cfg.epochs {
            debug!("diffusion epoch {epoch}: loss {mean:.5}");
        }
    }
    if let Some(last) = history.last() {
        info!("diffusion trained {steps} steps, final epoch loss {last:.5}");
    }
    Ok(DiffusionTrainOutcome { loss_history: history, steps })
}

/// Samples every output slice with its own rng stream; `batch` slices share a network call.
pub fn reconstruct_volume(
    model: &DiffusionModel<f32>,
    inr: Option<&InrField<f32>>,
    stack: &ProjectionStack,
    depth_out: usize,
    seed: u64,
    batch: usize,
) -> Result<Volume> {
    if depth_out == 0 || batch == 0 {
        return Err(Error::InvalidArgument("depth_out and batch must be >= 1".into()));
    }
    let (h, w) = (stack.height(), stack.width());
    let needs_inr = model.config.needs_inr();
    let field = match (needs_inr, inr) {
        (true, None) => return Err(Error::InvalidArgument("reconstruction needs the INR prior".into())),
        (true, Some(f)) => Some(f),
        _ => None,
    };
    let opts = model.config.prior;
    let mut cache: HashMap<Vec<u64>, Plane> = HashMap::new();
    let zs: Vec<f64> = (0..depth_out).map(|k| slice_depth(k, depth_out).value()).collect();
    let mut priors = Vec::new();
    if let Some(f) = field {
        for &z in &zs {
            let (depths, _) = prior_window(z, stack.step_length(), stack.source_depth(), opts)?;
            let key: Vec<u64> = depths.iter().map(|d| d.to_bits()).collect();
            if !cache.contains_key(&key) {
                let p = infer_prior(f, z, stack.step_length(), stack.source_depth(), h, w, opts)?;
                cache.insert(key.clone(), p);
            }
            priors.push(cache[&key].clone());
        }
    }
    let mut planes = Vec::with_capacity(depth_out);
    for start in (0..depth_out).step_by(batch) {
        let end = (start + batch).min(depth_out);
        let projs: Vec<&Plane> = (start..end).map(|k| &stack.projections()[stack.index_for_depth(zs[k])]).collect();
        let pr: Option<Vec<&Plane>> = field.map(|_| priors[start..end].iter().collect());
        let mut rngs: Vec<ChaCha8Rng> = (start..end).map(|k| slice_rng(seed, k)).collect();
        planes.extend(model.sample_batch(&projs, &zs[start..end], pr.as_deref(), &mut rngs, None)?);
        debug!("sampled slices {start}..{end} of {depth_out}");
    }
    Volume::from_planes("diffusion", &planes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::EncodingConfig;
    use rand_distr::Distribution;

    pub(crate) fn micro_config() -> DiffusionConfig {
        DiffusionConfig {
            schedule: ScheduleConfig { train_steps: 50, inference_steps: 10, ..Default::default() },
            unet: UNetConfig { base_channels: 4, channel_mult: vec![1, 2], time_dim: 8 },
            condition: ConditionConfig {
                c_img: 4,
                c_pos: 4,
                img_channels: [2, 2, 4],
                pos_encoding: EncodingConfig::Gaussian { features: 8, sigma: 1.0 },
                prior_block: false,
            },
            prior: PriorOptions { mode: PriorMode::Off, centered_offsets: false },
            guidance: GuidanceConfig { gamma: 0.0, ..Default::default() },
            ..Default::default()
        }
    }

    fn random_plane(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Plane {
        Plane::new(16, 16, (0..256).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.len(), 1000);
        assert!((s.beta(1) - 1e-4).abs() < 1e-15 && (s.beta(1000) - 2e-2).abs() < 1e-15);
        assert!((1..1000).all(|t| s.alpha_bar(t + 1) < s.alpha_bar(t)));
        assert!(s.alpha_bar(1000) < 0.01);
        let ts = s.inference_timesteps(100);
        assert_eq!((ts.len(), ts[0], *ts.last().unwrap()), (100, 1000, 10));
        assert_eq!(s.inference_timesteps(1000).len(), 1000);
        assert!(NoiseSchedule::from_betas(vec![0.1, 1.0]).is_err());
    }

    #[test]
    fn forward_noise_fixtures() {
        let s = NoiseSchedule::from_betas(vec![0.1; 4]).unwrap();
        let x0 = Plane::new(1, 3, vec![0.5, -1.0, 0.25]).unwrap();
        let zero = Plane::filled(1, 3, 0.0);
        let out = forward_noise(&x0, 2, &s, &zero).unwrap();
        for (o, x) in out.data.iter().zip(&x0.data) {
            assert!((o - 0.9 * x).abs() < 1e-6);
        }
        let eps = Plane::new(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let out = forward_noise(&x0, 2, &s, &eps).unwrap();
        for i in 0..3 {
            let e = 0.9 * x0.data[i] as f64 + 0.19f64.sqrt() * eps.data[i] as f64;
            assert!((out.data[i] as f64 - e).abs() < 1e-6);
        }
        assert!(forward_noise(&x0, 0, &s, &eps).is_err());
        assert!(forward_noise(&x0, 5, &s, &eps).is_err());
    }

    #[test]
    fn apply_prior_fixtures() {
        let x = Plane::new(1, 2, vec![0.3, -0.7]).unwrap();
        let m = Plane::filled(1, 2, 1.0);
        assert_eq!(apply_prior(&x, &m, 0.0).unwrap(), x);
        assert_eq!(apply_prior(&x, &m, 1.0).unwrap(), m);
        let zero = Plane::filled(1, 2, 0.0);
        let out = apply_prior(&zero, &m, 0.1).unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.1).abs() < 1e-7));
        assert!(apply_prior(&x, &Plane::filled(2, 1, 0.0), 0.1).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = DiffusionConfig::default();
        assert!(c.validate().is_ok());
        c.guidance.gamma = 1.0;
        assert!(c.validate().is_err());
        c.guidance.gamma = 0.1;
        c.prior.mode = PriorMode::Off;
        assert!(c.validate().is_err());
        c.prior.mode = PriorMode::ConditionConcat;
        assert!(c.validate().is_err());
        c.guidance.gamma = 0.0;
        assert!(c.validate().is_ok());
        c.guidance.p_uncond = 1.5;
        assert!(c.validate().is_err());
        let g = GuidanceConfig { gamma: 0.999, ..Default::default() };
        assert_eq!(g.effective_gamma(), MAX_GAMMA);
    }

    fn micro_batch(rng: &mut ChaCha8Rng, b: usize, unit_eps: bool) -> TrainBatch {
        let eps = (0..b * 256)
            .map(|_| if unit_eps { if rng.gen::<bool>() { 1.0 } else { -1.0 } } else { StandardNormal.sample(rng) })
            .collect();
        TrainBatch {
            x0: (0..b).map(|_| random_plane(rng, 0.0, 1.0)).collect(),
            projections: (0..b).map(|_| random_plane(rng, 0.0, 1.0)).collect(),
            z: (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            priors: None,
            t: (0..b).map(|_| rng.gen_range(1..=50)).collect(),
            eps,
            drop: (0..b).map(|i| i == 0).collect(),
        }
    }

    #[test]
    fn zero_output_head_gives_unit_loss() {
        let cfg = DiffusionConfig { input_skip: false, ..micro_config() };
        let model = DiffusionModel::<f64>::new(&cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = micro_batch(&mut rng, 3, true);
        let mut g = Graph::new();
        let l = model.loss_graph(&mut g, false, &batch, &PriorSource::None);
        assert_eq!(g.value(l).item(), 1.0);
    }

    #[test]
    fn exact_prediction_gives_zero_loss() {
        let mut cfg = micro_config();
        cfg.guidance.prediction_target = PredictionTarget::X0;
        let model = DiffusionModel::<f64>::new(&cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut batch = micro_batch(&mut rng, 2, false);
        for p in &mut batch.x0 {
            p.data.iter_mut().for_each(|v| *v = 0.5);
        }
        let mut g = Graph::new();
        let l = model.loss_graph(&mut g, false, &batch, &PriorSource::None);
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn training_reduces_loss_on_constant_phantom() {
        let cfg = micro_config();
        let mut model = DiffusionModel::<f32>::new(&cfg, 3).unwrap();
        let truth = Volume::from_fn("c", [8, 16, 16], |_, _, _| 0.7).unwrap();
        let stack = crate::acquisition::project(&truth, &crate::acquisition::AcquisitionConfig::new(2)).unwrap();
        let tc = DiffusionTrainConfig { epochs: 60, batch: 4, learning_rate: 3e-3, seed: 1, ..Default::default() };
        let out = train_diffusion(&mut model, None, &truth, &stack, &tc, 1e-3).unwrap();
        let first: f64 = out.loss_history[..5].iter().sum::<f64>() / 5.0;
        let last: f64 = out.loss_history[out.loss_history.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(last < 0.5 * first, "{first} -> {last}");
    }

    #[test]
    fn dihedral_covers_the_square_group() {
        let p = Plane { height: 3, width: 3, data: (0..9).map(|v| v as f32).collect() };
        let images: Vec<Vec<f32>> = (0..8).map(|d| dihedral(&p, d).data).collect();
        for (i, a) in images.iter().enumerate() {
            assert!(images[i + 1..].iter().all(|b| b != a), "transform {i} repeats");
            let mut sorted = a.clone();
            sorted.sort_by(f32::total_cmp);
            assert_eq!(sorted, p.data);
        }
        assert_eq!(dihedral(&p, 1).data[..3], [6.0, 7.0, 8.0]);
        assert_eq!(dihedral(&p, 4).data[..3], [0.0, 3.0, 6.0]);
        for d in 0..4 {
            assert_eq!(dihedral(&dihedral(&p, d), d), p);
        }
        let wide = Plane { height: 2, width: 3, data: (0..6).map(|v| v as f32).collect() };
        assert_eq!(dihedral(&wide, 4), wide);
    }

    #[test]
    fn crop_extracts_the_window() {
        let p = Plane { height: 4, width: 5, data: (0..20).map(|v| v as f32).collect() };
        assert_eq!(crop(&p, 1, 2, 2).data, vec![7.0, 8.0, 12.0, 13.0]);
    }

    #[test]
    fn augmented_crop_training_runs() {
        let mut model = DiffusionModel::<f32>::new(&micro_config(), 3).unwrap();
        let truth = Volume::from_fn("c", [8, 32, 32], |_, y, x| ((y + x) % 5) as f32 / 4.0).unwrap();
        let stack = crate::acquisition::project(&truth, &crate::acquisition::AcquisitionConfig::new(2)).unwrap();
        let tc = DiffusionTrainConfig { epochs: 2, batch: 4, augment: true, crop: Some(16), ..Default::default() };
        let out = train_diffusion(&mut model, None, &truth, &stack, &tc, 1e-3).unwrap();
        assert!(out.loss_history.iter().all(|l| l.is_finite()));
        let bad = DiffusionTrainConfig { crop: Some(64), ..tc };
        assert!(matches!(train_diffusion(&mut model, None, &truth, &stack, &bad, 1e-3), Err(Error::Config(_))));
    }

    #[test]
    fn guidance_is_affine_in_w() {
        let model = {
            let mut m = DiffusionModel::<f32>::new(&micro_config(), 4).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for id in m.params.ids().collect::<Vec<_>>() {
                for v in m.params.get_mut(id).data_mut() {
                    *v += 0.05 * rng.sample::<f32, _>(StandardNormal);
                }
            }
            m
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let proj = random_plane(&mut rng, 0.0, 1.0);
        let cond = model.conditions(&[&proj], &[0.2], None);
        let x: Vec<f32> = (0..256).map(|_| rng.sample(StandardNormal)).collect();
        let shape = [1, 1, 16, 16];
        let e0 = model.guided_eps(&x, &x, shape, 20, &cond, 0.0);
        let e1 = model.guided_eps(&x, &x, shape, 20, &cond, 1.0);
        let e2 = model.guided_eps(&x, &x, shape, 20, &cond, 2.0);
        let xin = Tensor::new(&shape, x.clone()).unwrap();
        assert_eq!(e0, model.eps_estimate(&xin, &x, 20, &cond));
        assert!(e0.iter().zip(&e1).any(|(a, b)| (a - b).abs() > 1e-6));
        for i in 0..256 {
            assert!((e2[i] - 2.0 * e1[i] + e0[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn sampler_is_deterministic_and_batch_independent() {
        let mut cfg = micro_config();
        cfg.prior.mode = PriorMode::Neighboring;
        cfg.guidance.gamma = 0.1;
        let model = DiffusionModel::<f32>::new(&cfg, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let projs: Vec<Plane> = (0..3).map(|_| random_plane(&mut rng, 0.0, 1.0)).collect();
        let priors: Vec<Plane> = (0..3).map(|_| random_plane(&mut rng, 0.0, 1.0)).collect();
        let zs = [-0.5, 0.0, 0.5];
        let refs: Vec<&Plane> = projs.iter().collect();
        let prefs: Vec<&Plane> = priors.iter().collect();
        let mut rngs: Vec<ChaCha8Rng> = (0..3).map(|k| slice_rng(1, k)).collect();
        let batch = model.sample_batch(&refs, &zs, Some(&prefs), &mut rngs, None).unwrap();
        for k in 0..3 {
            let single = model.sample_slice(&projs[k], zs[k], Some(&priors[k]), &mut slice_rng(1, k)).unwrap();
            assert_eq!(single, batch[k]);
            assert!(single.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(model.sample_batch(&refs, &zs, None, &mut rngs, None).is_err());
    }

    #[test]
    fn zero_gamma_matches_plain_sampler() {
        let mut cfg = micro_config();
        cfg.guidance.w = 1.5;
        let model = DiffusionModel::<f32>::new(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let proj = random_plane(&mut rng, 0.0, 1.0);
        let a = model.sample_slice(&proj, 0.1, None, &mut slice_rng(3, 0)).unwrap();
        let b = model.sample_plain(&proj, 0.1, &mut slice_rng(3, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn literal_update_subtracts_estimate() {
        let mut cfg = micro_config();
        cfg.literal_alg2 = true;
        let model = DiffusionModel::<f32>::new(&cfg, 8).unwrap();
        let mut x = vec![0.5f32, -0.25];
        model.reverse_step(&mut x, &[0.25, 0.25], 10, 5, &mut [ChaCha8Rng::seed_from_u64(0)]);
        assert_eq!(x, vec![0.25, -0.5]);
    }

    #[test]
    fn clipped_update_matches_plain_update_inside_range() {
        let mut cfg = micro_config();
        let clipped = DiffusionModel::<f32>::new(&cfg, 8).unwrap();
        cfg.clip_x0 = false;
        let plain = DiffusionModel::<f32>::new(&cfg, 8).unwrap();
        let s = &plain.schedule;
        let (t, t_prev) = (30, 25);
        let (ab, x0s) = (s.alpha_bar(t), [-0.9, 0.2, 0.7]);
        let eps = [0.3, -1.2, 0.8];
        let x: Vec<f32> = x0s.iter().zip(&eps).map(|(x0, e)| (ab.sqrt() * x0 + (1.0 - ab).sqrt() * e) as f32).collect();
        let (mut a, mut b) = (x.clone(), x.clone());
        clipped.reverse_step(&mut a, &eps, t, t_prev, &mut [ChaCha8Rng::seed_from_u64(1)]);
        plain.reverse_step(&mut b, &eps, t, t_prev, &mut [ChaCha8Rng::seed_from_u64(1)]);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-5, "{u} vs {v}");
        }
        let mut far = vec![50.0f32];
        clipped.reverse_step(&mut far, &[0.0], t, 0, &mut [ChaCha8Rng::seed_from_u64(1)]);
        assert!(far[0] <= 1.0 + 1e-6);
    }

    #[test]
    fn params_round_trip_by_name() {
        let cfg = micro_config();
        let a = DiffusionModel::<f32>::new(&cfg, 1).unwrap();
        let mut b = DiffusionModel::<f32>::new(&cfg, 2).unwrap();
        b.load_params(&a.params).unwrap();
        assert_eq!(crate::inr::params_fingerprint(&a.params), crate::inr::params_fingerprint(&b.params));
    }
}
