//! Positional encodings mapping normalised coordinates to feature vectors.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Random Fourier features `[sin(2 pi B c), cos(2 pi B c)]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianEncoding {
    /// `[F/2, 3]` frequency matrix, rows are `(x, y, z)` weights.
    pub b: Vec<[f64; 3]>,
    pub sigma: f64,
}

impl GaussianEncoding {
    pub fn new(out_dim: usize, sigma: f64, seed: u64) -> Result<Self> {
        if out_dim == 0 || out_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!("gaussian encoding width {out_dim} must be even and > 0")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gaussian encoding sigma {sigma} must be > 0")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, sigma).unwrap();
        let b = (0..out_dim / 2).map(|_| [dist.sample(&mut rng), dist.sample(&mut rng), dist.sample(&mut rng)]).collect();
        Ok(Self { b, sigma })
    }

    pub fn out_dim(&self) -> usize {
        2 * self.b.len()
    }

    fn encode_into(&self, c: [f64; 3], out: &mut [f64]) {
        let half = self.b.len();
        for (j, row) in self.b.iter().enumerate() {
            let phase = 2.0 * PI * (row[0] * c[0] + row[1] * c[1] + row[2] * c[2]);
            let (s, co) = phase.sin_cos();
            out[j] = s;
            out[half + j] = co;
        }
    }
}

/// NeRF-style per-axis `sin(2^j pi c), cos(2^j pi c)` features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinCosEncoding {
    pub num_frequencies: usize,
    #[serde(default)]
    pub include_input: bool,
}

impl SinCosEncoding {
    pub fn new(num_frequencies: usize, include_input: bool) -> Result<Self> {
        if num_frequencies == 0 {
            return Err(Error::InvalidArgument("sin-cos encoding needs at least one frequency".into()));
        }
        Ok(Self { num_frequencies, include_input })
    }

    pub fn out_dim(&self) -> usize {
        6 * self.num_frequencies + if self.include_input { 3 } else { 0 }
    }

    /// Layout per axis: `sin f0, cos f0, sin f1, cos f1, ...`, axes in `x, y, z` order.
    fn encode_into(&self, c: [f64; 3], out: &mut [f64]) {
        let mut i = 0;
        if self.include_input {
            out[..3].copy_from_slice(&c);
            i = 3;
        }
        for &v in &c {
            for j in 0..self.num_frequencies {
                let (s, co) = (f64::powi(2.0, j as i32) * PI * v).sin_cos();
                out[i] = s;
                out[i + 1] = co;
                i += 2;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PositionalEncoding {
    Gaussian(GaussianEncoding),
    SinCos(SinCosEncoding),
}

/// Serializable recipe for a [`PositionalEncoding`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncodingConfig {
    Gaussian { features: usize, sigma: f64 },
    SinCos { num_frequencies: usize, include_input: bool },
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig::Gaussian { features: 512, sigma: 10.0 }
    }
}

impl EncodingConfig {
    pub fn build(&self, seed: u64) -> Result<PositionalEncoding> {
        Ok(match *self {
            EncodingConfig::Gaussian { features, sigma } => {
                PositionalEncoding::Gaussian(GaussianEncoding::new(features, sigma, seed)?)
            }
            EncodingConfig::SinCos { num_frequencies, include_input } => {
                PositionalEncoding::SinCos(SinCosEncoding::new(num_frequencies, include_input)?)
            }
        })
    }
}

/// Normalised centre of pixel `i` on an axis of `len` pixels.
pub fn pixel_center(i: usize, len: usize) -> f64 {
    -1.0 + 2.0 * (i as f64 + 0.5) / len as f64
}

impl PositionalEncoding {
    pub fn out_dim(&self) -> usize {
        match self {
            PositionalEncoding::Gaussian(g) => g.out_dim(),
            PositionalEncoding::SinCos(s) => s.out_dim(),
        }
    }

    /// Features of `coord = (x, y, z)`.
    pub fn encode(&self, coord: [f64; 3]) -> Result<Vec<f64>> {
        if coord.iter().any(|c| !(-1.0..=1.0).contains(c)) {
            return Err(Error::Range(format!("coordinate {coord:?} outside [-1, 1]")));
        }
        let mut out = vec![0.0; self.out_dim()];
        self.encode_into(coord, &mut out);
        Ok(out)
    }

    fn encode_into(&self, coord: [f64; 3], out: &mut [f64]) {
        match self {
            PositionalEncoding::Gaussian(g) => g.encode_into(coord, out),
            PositionalEncoding::SinCos(s) => s.encode_into(coord, out),
        }
    }

    /// Row-major `[H * W, F]` features for every pixel centre of a slice at depth `z`.
    pub fn lateral_grid(&self, z: f64, height: usize, width: usize) -> Vec<f64> {
        let f = self.out_dim();
        let mut out = vec![0.0; height * width * f];
        for y in 0..height {
            for x in 0..width {
                let c = [pixel_center(x, width), pixel_center(y, height), z];
                let row = (y * width + x) * f;
                self.encode_into(c, &mut out[row..row + f]);
            }
        }
        out
    }

    /// Features of the depth-only coordinate `(0, 0, z)` used for conditioning.
    pub fn depth_features(&self, z: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim()];
        self.encode_into([0.0, 0.0, z], &mut out);
        out
    }
}
