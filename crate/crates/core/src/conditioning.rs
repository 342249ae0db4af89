//! Condition vectors built from the nearest projection and the query depth.

use rand::Rng;
use serde::{Deserialize, Serialize};
use volrecon_grad::{Bound, Conv2d, Graph, Linear, ParamId, ParamStore, Real, Tensor, Var};

use crate::encoding::{EncodingConfig, PositionalEncoding};
use crate::error::{Error, Result};
use crate::volume::Plane;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditionConfig {
    pub c_img: usize,
    pub c_pos: usize,
    /// Output channels of the first three stride-2 convolutions; the fourth emits `c_img`.
    pub img_channels: [usize; 3],
    pub pos_encoding: EncodingConfig,
    /// Feed the INR prior through the image encoder as an extra block.
    pub prior_block: bool,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        Self {
            c_img: 128,
            c_pos: 128,
            img_channels: [16, 32, 64],
            pos_encoding: EncodingConfig::Gaussian { features: 64, sigma: 1.0 },
            prior_block: false,
        }
    }
}

impl ConditionConfig {
    /// Lengths of the concatenated blocks: image, position and optionally prior.
    pub fn blocks(&self) -> Vec<usize> {
        let mut b = vec![self.c_img, self.c_pos];
        if self.prior_block {
            b.push(self.c_img);
        }
        b
    }

    pub fn dim(&self) -> usize {
        self.blocks().iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub vector: Vec<f32>,
    pub is_null: bool,
}

/// `E_img`, `E_pos` and the learned null token. Parameter ids refer to the
/// owning model's store.
#[derive(Clone, Debug)]
pub struct ConditionEncoders {
    pub config: ConditionConfig,
    pub pos_encoding: PositionalEncoding,
    img: [Conv2d; 4],
    pos: [Linear; 2],
    pub null_token: ParamId,
}

impl ConditionEncoders {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, config: &ConditionConfig, seed: u64, rng: &mut R) -> Result<Self> {
        if config.c_img == 0 || config.c_pos == 0 || config.img_channels.contains(&0) {
            return Err(Error::Config("condition widths must be positive".into()));
        }
        let pos_encoding = config.pos_encoding.build(seed)?;
        let ch = config.img_channels;
        let img = [
            Conv2d::new(store, "cond.img.0", 1, ch[0], 3, 2, 1, rng),
            Conv2d::new(store, "cond.img.1", ch[0], ch[1], 3, 2, 1, rng),
            Conv2d::new(store, "cond.img.2", ch[1], ch[2], 3, 2, 1, rng),
            Conv2d::new(store, "cond.img.3", ch[2], config.c_img, 3, 2, 1, rng),
        ];
        let pos = [
            Linear::new(store, "cond.pos.0", pos_encoding.out_dim(), config.c_pos, true, rng),
            Linear::new(store, "cond.pos.1", config.c_pos, config.c_pos, true, rng),
        ];
        let null_token = store.add_normal("cond.null", &[config.dim()], 0.1, rng);
        Ok(Self { config: config.clone(), pos_encoding, img, pos, null_token })
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    /// `[B, 1, H, W] -> [B, c_img]`.
    pub fn encode_image<T: Real>(&self, g: &mut Graph<T>, p: Bound<'_, T>, x: Var) -> Var {
        let mut h = x;
        for conv in &self.img {
            h = conv.forward(g, p, h);
            h = g.silu(h);
        }
        g.global_avg_pool(h)
    }

    /// `[B, F] -> [B, c_pos]`.
    pub fn encode_position<T: Real>(&self, g: &mut Graph<T>, p: Bound<'_, T>, feats: Var) -> Var {
        let h = self.pos[0].forward(g, p, feats);
        let h = g.silu(h);
        self.pos[1].forward(g, p, h)
    }

    /// `[B, F]` positional features of the depths `zs`.
    pub fn depth_features<T: Real>(&self, zs: &[f64]) -> Tensor<T> {
        let f = self.pos_encoding.out_dim();
        let data: Vec<T> = zs.iter().flat_map(|&z| self.pos_encoding.depth_features(z)).map(T::lit).collect();
        Tensor::new(&[zs.len(), f], data).unwrap()
    }

    /// Concatenated condition `[B, dim]`; `proj` and `prior` are model-domain images.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, p: Bound<'_, T>, proj: Var, zs: &[f64], prior: Option<Var>) -> Var {
        let img = self.encode_image(g, p, proj);
        let feats = g.constant(self.depth_features(zs));
        let pos = self.encode_position(g, p, feats);
        let mut parts = vec![img, pos];
        if self.config.prior_block {
            let prior = prior.expect("prior block requires a prior image");
            parts.push(self.encode_image(g, p, prior));
        }
        g.concat(&parts, 1)
    }

    /// Replaces the rows flagged in `drop` by the null token.
    pub fn apply_drop<T: Real>(&self, g: &mut Graph<T>, p: Bound<'_, T>, cond: Var, drop: &[bool]) -> Var {
        if !drop.iter().any(|&d| d) {
            return cond;
        }
        let token = p.var(g, self.null_token);
        g.replace_rows(cond, token, drop)
    }

    pub fn null_condition<T: Real>(&self, store: &ParamStore<T>) -> Condition {
        Condition { vector: store.get(self.null_token).data().iter().map(|v| v.as_f64() as f32).collect(), is_null: true }
    }

    /// Condition for one slice at depth `z`. Images are in `[0, 1]`.
    pub fn build_condition<T: Real>(
        &self,
        store: &ParamStore<T>,
        projection: &Plane,
        z: f64,
        prior: Option<&Plane>,
    ) -> Result<Condition> {
        let min = 16;
        if projection.height < min || projection.width < min {
            return Err(Error::Shape(format!(
                "image encoder needs at least {min}x{min} input, got {}x{}",
                projection.height, projection.width
            )));
        }
        if self.config.prior_block != prior.is_some() {
            return Err(Error::InvalidArgument("prior image must be given exactly when the prior block is enabled".into()));
        }
        if let Some(pr) = prior {
            if !pr.same_shape(projection) {
                return Err(Error::Shape("prior and projection shapes differ".into()));
            }
        }
        let mut g = Graph::new();
        let p = Bound::frozen(store);
        let proj = g.constant(model_domain(&[projection]));
        let prior = prior.map(|pr| g.constant(model_domain(&[pr])));
        let c = self.encode(&mut g, p, proj, &[z], prior);
        let vector = g.value(c).data().iter().map(|v| v.as_f64() as f32).collect();
        Ok(Condition { vector, is_null: false })
    }
}

/// `[B, 1, H, W]` tensor of `2x - 1` images.
pub fn model_domain<T: Real>(planes: &[&Plane]) -> Tensor<T> {
    let (h, w) = (planes[0].height, planes[0].width);
    let data = planes.iter().flat_map(|p| p.data.iter().map(|&v| T::lit(2.0 * v as f64 - 1.0))).collect();
    Tensor::new(&[planes.len(), 1, h, w], data).unwrap()
}

/// With probability `p_uncond` the null condition, otherwise `c` unchanged.
pub fn drop_condition<R: Rng>(c: Condition, null: &Condition, p_uncond: f64, rng: &mut R) -> Result<Condition> {
    Ok(if draw_drop(p_uncond, rng)? { null.clone() } else { c })
}

/// One Bernoulli(`p_uncond`) draw.
pub fn draw_drop<R: Rng>(p_uncond: f64, rng: &mut R) -> Result<bool> {
    if !(0.0..=1.0).contains(&p_uncond) {
        return Err(Error::InvalidArgument(format!("p_uncond {p_uncond} outside [0, 1]")));
    }
    Ok(rng.gen::<f64>() < p_uncond)
}
