//! Implicit neural field trained through the projection-averaging forward model.

use std::f64::consts::PI;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use volrecon_grad::{Adam, Bound, Graph, Linear, ParamStore, Real, Tensor, Var};

use crate::encoding::{EncodingConfig, PositionalEncoding};
use crate::error::{Error, Result};
use crate::volume::{depth_to_index, slice_depth, Plane, ProjectionStack};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InrArch {
    pub encoding: EncodingConfig,
    pub hidden: Vec<usize>,
}

impl Default for InrArch {
    fn default() -> Self {
        Self { encoding: EncodingConfig::default(), hidden: vec![256, 256, 256] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InrTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Projections per optimiser step.
    pub batch: usize,
    pub seed: u64,
    pub arch: InrArch,
}

impl Default for InrTrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, epochs: 500, batch: 1, seed: 0, arch: InrArch::default() }
    }
}

impl InrTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("inr learning_rate {} must be > 0", self.learning_rate)));
        }
        if self.batch == 0 {
            return Err(Error::Config("inr batch must be >= 1".into()));
        }
        if self.arch.hidden.is_empty() || self.arch.hidden.contains(&0) {
            return Err(Error::Config(format!("inr hidden widths {:?} must be non-empty and positive", self.arch.hidden)));
        }
        Ok(())
    }
}

/// Coordinate MLP `sigmoid(MLP(p(x, y, z)))`.
#[derive(Debug)]
pub struct InrField<T> {
    pub encoding: PositionalEncoding,
    pub params: ParamStore<T>,
    pub layers: Vec<Linear>,
    pub trained: bool,
}

impl<T: Real> Clone for InrField<T> {
    fn clone(&self) -> Self {
        Self { encoding: self.encoding.clone(), params: self.params.clone(), layers: self.layers.clone(), trained: self.trained }
    }
}

impl<T: Real> InrField<T> {
    pub fn new(arch: &InrArch, seed: u64) -> Result<Self> {
        let encoding = arch.encoding.build(seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut width = encoding.out_dim();
        for (i, &h) in arch.hidden.iter().chain(std::iter::once(&1)).enumerate() {
            layers.push(Linear::new(&mut params, &format!("mlp.{i}"), width, h, true, &mut rng));
            width = h;
        }
        Ok(Self { encoding, params, layers, trained: false })
    }

    /// Rebuilds the layer table for a store whose names follow `mlp.{i}.weight/bias`.
    pub fn from_parts(encoding: PositionalEncoding, params: ParamStore<T>, trained: bool) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = encoding.out_dim();
        for i in 0.. {
            let Some(w) = params.by_name(&format!("mlp.{i}.weight")) else { break };
            let b = params.by_name(&format!("mlp.{i}.bias"));
            let s = params.get(w).shape();
            if s.len() != 2 || s[1] != width {
                return Err(Error::Shape(format!("layer {i} weight {s:?} does not follow width {width}")));
            }
            layers.push(Linear { w, b, in_features: s[1], out_features: s[0] });
            width = s[0];
        }
        if layers.is_empty() || width != 1 {
            return Err(Error::Shape("INR parameters must end in a scalar head".into()));
        }
        Ok(Self { encoding, params, layers, trained })
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.out_features).collect()
    }

    pub fn cast<U: Real>(&self) -> InrField<U> {
        InrField { encoding: self.encoding.clone(), params: self.params.cast(), layers: self.layers.clone(), trained: self.trained }
    }

    /// Zeroes the output layer so every query returns `sigmoid(0) = 0.5`.
    pub fn zero_head(&mut self) {
        let head = *self.layers.last().unwrap();
        for id in std::iter::once(head.w).chain(head.b) {
            for v in self.params.get_mut(id).data_mut() {
                *v = T::zero();
            }
        }
    }

    /// `feats [.., F] -> [.., 1]` in `[0, 1]`.
    pub fn forward(&self, g: &mut Graph<T>, p: Bound<'_, T>, feats: Var) -> Var {
        let mut h = feats;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h);
            h = if i == last { g.sigmoid(h) } else { g.silu(h) };
        }
        h
    }

    pub fn bound(&self, trainable: bool) -> Bound<'_, T> {
        Bound { store: &self.params, trainable }
    }

    /// Lateral features of `zs` stacked as `[zs.len() * H * W, F]`.
    pub fn slice_features(&self, zs: &[f64], height: usize, width: usize) -> Tensor<T> {
        let f = self.encoding.out_dim();
        let mut data = Vec::with_capacity(zs.len() * height * width * f);
        for &z in zs {
            data.extend(self.encoding.lateral_grid(z, height, width).into_iter().map(T::lit));
        }
        Tensor::new(&[zs.len() * height * width, f], data).unwrap()
    }

    /// Field evaluated at every pixel centre of the slice at depth `z`.
    pub fn render_slice(&self, z: f64, height: usize, width: usize) -> Plane {
        let mut g = Graph::new();
        let x = g.constant(self.slice_features(&[z], height, width));
        let y = self.forward(&mut g, self.bound(false), x);
        let data = g.value(y).data().iter().map(|v| v.as_f64() as f32).collect();
        Plane::new(height, width, data).expect("rendered slice shape")
    }

    /// SHA-256 over parameter names, shapes and values.
    pub fn fingerprint(&self) -> String {
        params_fingerprint(&self.params)
    }
}

pub fn params_fingerprint<T: Real>(params: &ParamStore<T>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.as_f64().to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Adds `sum_i MSE(mean_k f(z_ik), X_i)` over `indices` to the graph.
fn loss_graph<T: Real>(
    g: &mut Graph<T>,
    f: &InrField<T>,
    trainable: bool,
    stack: &ProjectionStack,
    indices: &[usize],
    feats: &mut dyn FnMut(usize) -> Tensor<T>,
) -> Var {
    let (h, w, n) = (stack.height(), stack.width(), stack.step_length());
    let mut total: Option<Var> = None;
    for &i in indices {
        let x = g.constant(feats(i));
        let y = f.forward(g, f.bound(trainable), x);
        let y = g.reshape(y, &[n, h * w]);
        let mean = g.mean_axis(y, 0);
        let target: Vec<T> = stack.projections()[i].data.iter().map(|&v| T::lit(v as f64)).collect();
        let target = g.constant(Tensor::new(&[h * w], target).unwrap());
        let l = g.mse(mean, target);
        total = Some(match total {
            Some(t) => g.add(t, l),
            None => l,
        });
    }
    total.expect("non-empty index set")
}

/// Loss graph over the whole stack with trainable parameters, for gradient checks.
pub fn inr_loss_graph<T: Real>(f: &InrField<T>, stack: &ProjectionStack) -> (Graph<T>, Var) {
    let mut g = Graph::new();
    let all: Vec<usize> = (0..stack.len()).collect();
    let mut feats = |i| f.slice_features(&stack.subvolume_depths(i), stack.height(), stack.width());
    let loss = loss_graph(&mut g, f, true, stack, &all, &mut feats);
    (g, loss)
}

/// Trainable projection loss over `indices`, added to an existing graph.
pub fn inr_loss_graph_subset<T: Real>(g: &mut Graph<T>, f: &InrField<T>, stack: &ProjectionStack, indices: &[usize]) -> Var {
    let mut feats = |i| f.slice_features(&stack.subvolume_depths(i), stack.height(), stack.width());
    loss_graph(g, f, true, stack, indices, &mut feats)
}

/// Sum over projections of the MSE between the mean rendered sub-volume and the projection.
pub fn inr_loss<T: Real>(f: &InrField<T>, stack: &ProjectionStack) -> f64 {
    let mut total = 0.0;
    for i in 0..stack.len() {
        let mut g = Graph::new();
        let mut feats = |i| f.slice_features(&stack.subvolume_depths(i), stack.height(), stack.width());
        let l = loss_graph(&mut g, f, false, stack, &[i], &mut feats);
        total += g.value(l).item().as_f64();
    }
    total
}

#[derive(Clone, Debug)]
pub struct InrTrainOutcome {
    pub field: InrField<f32>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Per-epoch sum of step losses.
    pub loss_history: Vec<f64>,
}

pub fn train_inr(stack: &ProjectionStack, cfg: &InrTrainConfig) -> Result<InrTrainOutcome> {
    cfg.validate()?;
    let mut field = InrField::<f32>::new(&cfg.arch, cfg.seed)?;
    let (h, w) = (stack.height(), stack.width());
    let cache: Vec<Tensor<f32>> =
        (0..stack.len()).map(|i| field.slice_features(&stack.subvolume_depths(i), h, w)).collect();
    let initial_loss = inr_loss(&field, stack);
    if cfg.epochs == 0 {
        return Ok(InrTrainOutcome { field, initial_loss, final_loss: initial_loss, loss_history: Vec::new() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut opt = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..stack.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(cfg.batch).enumerate() {
            let mut g = Graph::new();
            let loss = loss_graph(&mut g, &field, true, stack, batch, &mut |i| cache[i].clone());
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("INR loss {value} at epoch {epoch}, step {step}")));
            }
            let grads = g.backward(loss);
            if !grads.all_finite() {
                return Err(Error::NonFinite(format!("INR gradient at epoch {epoch}, step {step}")));
            }
            opt.step(&mut field.params, &grads);
            epoch_loss += value;
        }
        history.push(epoch_loss);
        if epoch % 50 == 0 || epoch + 1 == cfg.epochs {
            debug!("inr epoch {epoch}: loss {epoch_loss:.6}");
        }
    }
    field.trained = true;
    let final_loss = inr_loss(&field, stack);
    info!("inr trained: loss {initial_loss:.6} -> {final_loss:.6}");
    Ok(InrTrainOutcome { field, initial_loss, final_loss, loss_history: history })
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if n == 0 || k == 0 || k > n {
        return Err(Error::Range(format!("neighbor index {k} outside [1, {n}]")));
    }
    Ok(())
}

fn gaussian(u: f64) -> f64 {
    (-(u - 0.5).powi(2) / 2.0).exp() / (2.0 * PI).sqrt()
}

/// `g_k = exp(-(k/n - 0.5)^2 / 2) / sqrt(2 pi)`.
pub fn neighbor_weight(k: usize, n: usize) -> Result<f64> {
    check_k(k, n)?;
    Ok(gaussian(k as f64 / n as f64))
}

/// Symmetric variant evaluated at `(k - 0.5) / n`.
pub fn neighbor_weight_centered(k: usize, n: usize) -> Result<f64> {
    check_k(k, n)?;
    Ok(gaussian((k as f64 - 0.5) / n as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// Gaussian-weighted average over the sub-volume window.
    #[default]
    Neighboring,
    /// Equal weights over the window.
    UniformMean,
    /// The single slice at the query depth.
    NoNeighboring,
    /// Neighbouring prior fed to the condition encoder instead of the sampler input.
    ConditionConcat,
    Off,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriorOptions {
    pub mode: PriorMode,
    #[serde(default)]
    pub centered_offsets: bool,
}

/// Depths and normalised weights averaged into the prior at `z`.
pub fn prior_window(z: f64, n: usize, depth: usize, opts: PriorOptions) -> Result<(Vec<f64>, Vec<f64>)> {
    if n == 0 || depth == 0 {
        return Err(Error::InvalidArgument("window needs n >= 1 and depth >= 1".into()));
    }
    match opts.mode {
        PriorMode::Off => return Err(Error::InvalidArgument("prior mode is off".into())),
        PriorMode::NoNeighboring => return Ok((vec![z.clamp(-1.0, 1.0)], vec![1.0])),
        _ if n == 1 => return Ok((vec![z.clamp(-1.0, 1.0)], vec![1.0])),
        _ => {}
    }
    let k = depth_to_index(z, depth).round().clamp(0.0, depth as f64 - 1.0) as usize;
    let start = (k / n) * n;
    let depths = (0..n).map(|j| slice_depth((start + j).min(depth - 1), depth).value()).collect();
    let raw: Vec<f64> = match opts.mode {
        PriorMode::UniformMean => vec![1.0; n],
        _ if opts.centered_offsets => (1..=n).map(|k| neighbor_weight_centered(k, n)).collect::<Result<_>>()?,
        _ => (1..=n).map(|k| neighbor_weight(k, n)).collect::<Result<_>>()?,
    };
    let sum: f64 = raw.iter().sum();
    Ok((depths, raw.iter().map(|g| g / sum).collect()))
}

/// Weighted average of rendered slices over the window containing `z`.
pub fn infer_prior<T: Real>(
    f: &InrField<T>,
    z: f64,
    n: usize,
    depth: usize,
    height: usize,
    width: usize,
    opts: PriorOptions,
) -> Result<Plane> {
    let (depths, weights) = prior_window(z, n, depth, opts)?;
    let mut g = Graph::new();
    let x = g.constant(f.slice_features(&depths, height, width));
    let y = f.forward(&mut g, f.bound(false), x);
    let y = g.reshape(y, &[depths.len(), height * width]);
    let p = g.weighted_sum_axis(y, 0, &weights);
    let data = g.value(p).data().iter().map(|v| (v.as_f64() as f32).clamp(0.0, 1.0)).collect();
    Plane::new(height, width, data)
}
