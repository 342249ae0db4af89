//! Synthetic ground-truth phantoms and the axial n-frame averaging projector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{axial_center_of_subvolume, Plane, ProjectionStack, Volume};

pub const MIN_DIMS: [usize; 3] = [8, 16, 16];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    /// Random 3-D polyline tubes of radius 1-3 voxels (vasculature stand-in).
    Tubes,
    /// Random solid blobs (soma stand-in).
    Spheres,
    /// Dense thin branching tubes of radius <= 1 voxel.
    DendriteLike,
}

impl PhantomKind {
    fn radius_range(self) -> (f64, f64) {
        match self {
            PhantomKind::Tubes => (1.0, 3.0),
            PhantomKind::Spheres => (2.0, 5.0),
            PhantomKind::DendriteLike => (0.6, 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    /// `[D, H, W]`
    pub dims: [usize; 3],
    /// Target fraction of voxels above 0.5.
    pub density: f64,
    pub seed: u64,
    /// Gaussian blur sigma in voxels applied after rasterisation.
    pub smoothness: f64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().zip(MIN_DIMS).any(|(&d, m)| d < m) {
            return Err(Error::InvalidArgument(format!("phantom dims {:?} below minimum {MIN_DIMS:?}", self.dims)));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::InvalidArgument(format!("density {} not in (0, 1]", self.density)));
        }
        if !(self.smoothness >= 0.0 && self.smoothness.is_finite()) {
            return Err(Error::InvalidArgument(format!("smoothness {} must be >= 0", self.smoothness)));
        }
        let min_dim = *self.dims.iter().min().unwrap() as f64;
        let (rmin, _) = self.kind.radius_range();
        if 2.0 * rmin + 1.0 > min_dim {
            return Err(Error::InvalidArgument(format!(
                "dims {:?} too small for {:?} radius {rmin}",
                self.dims, self.kind
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    /// Axial averaging factor `n`.
    pub step_length: usize,
    /// Standard deviation of optional additive Gaussian sensor noise.
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub noise_seed: u64,
}

impl AcquisitionConfig {
    pub fn new(step_length: usize) -> Self {
        Self { step_length, noise_std: 0.0, noise_seed: 0 }
    }
}

/// Binary occupancy grid with a running count.
struct Mask {
    dims: [usize; 3],
    cells: Vec<bool>,
    count: usize,
}

impl Mask {
    fn new(dims: [usize; 3]) -> Self {
        Self { dims, cells: vec![false; dims.iter().product()], count: 0 }
    }

    fn mark(&mut self, d: usize, h: usize, w: usize) {
        let i = (d * self.dims[1] + h) * self.dims[2] + w;
        if !self.cells[i] {
            self.cells[i] = true;
            self.count += 1;
        }
    }

    fn bounds(&self, lo: f64, hi: f64, axis: usize) -> std::ops::RangeInclusive<usize> {
        let max = self.dims[axis] as f64 - 1.0;
        let a = lo.floor().clamp(0.0, max) as usize;
        let b = hi.ceil().clamp(0.0, max) as usize;
        a..=b
    }

    /// Marks voxel centres within `r` of segment `a-b`.
    fn capsule(&mut self, a: [f64; 3], b: [f64; 3], r: f64) {
        let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let len2 = ab.iter().map(|v| v * v).sum::<f64>().max(1e-12);
        let rd = self.bounds(a[0].min(b[0]) - r, a[0].max(b[0]) + r, 0);
        let rh = self.bounds(a[1].min(b[1]) - r, a[1].max(b[1]) + r, 1);
        let rw = self.bounds(a[2].min(b[2]) - r, a[2].max(b[2]) + r, 2);
        for d in rd {
            for h in rh.clone() {
                for w in rw.clone() {
                    let p = [d as f64, h as f64, w as f64];
                    let t = ((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1] + (p[2] - a[2]) * ab[2]) / len2;
                    let t = t.clamp(0.0, 1.0);
                    let dist2: f64 = (0..3).map(|k| (p[k] - a[k] - t * ab[k]).powi(2)).sum();
                    if dist2 <= r * r {
                        self.mark(d, h, w);
                    }
                }
            }
        }
    }

    fn inside(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| p[k] >= -0.5 && p[k] <= self.dims[k] as f64 - 0.5)
    }
}

fn random_point(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> [f64; 3] {
    [
        rng.gen_range(0.0..dims[0] as f64 - 1.0),
        rng.gen_range(0.0..dims[1] as f64 - 1.0),
        rng.gen_range(0.0..dims[2] as f64 - 1.0),
    ]
}

fn random_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let n = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v = [n.sample(rng), n.sample(rng), n.sample(rng)];
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len > 1e-6 {
            return [v[0] / len, v[1] / len, v[2] / len];
        }
    }
}

fn perturb(rng: &mut ChaCha8Rng, dir: [f64; 3], amount: f64) -> [f64; 3] {
    let n = Normal::new(0.0, amount).unwrap();
    let v = [dir[0] + n.sample(rng), dir[1] + n.sample(rng), dir[2] + n.sample(rng)];
    let len = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    [v[0] / len, v[1] / len, v[2] / len]
}

/// Rasterises structures in a fixed random order until `target` voxels are set.
fn rasterize(spec: &PhantomSpec, target: usize) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut mask = Mask::new(spec.dims);
    let (rmin, rmax) = spec.kind.radius_range();
    let rmax = rmax.min((*spec.dims.iter().min().unwrap() as f64 - 1.0) / 2.0).max(rmin);
    let total = mask.cells.len();
    let target = target.min(total);
    let mut attempts = 0usize;
    while mask.count < target && attempts < 100_000 {
        attempts += 1;
        let r = rng.gen_range(rmin..=rmax);
        match spec.kind {
            PhantomKind::Spheres => {
                let c = random_point(&mut rng, spec.dims);
                mask.capsule(c, c, r);
            }
            PhantomKind::Tubes => {
                let mut p = random_point(&mut rng, spec.dims);
                let mut dir = random_direction(&mut rng);
                for _ in 0..400 {
                    let q = [p[0] + 2.0 * dir[0], p[1] + 2.0 * dir[1], p[2] + 2.0 * dir[2]];
                    mask.capsule(p, q, r);
                    if mask.count >= target || !mask.inside(q) {
                        break;
                    }
                    p = q;
                    dir = perturb(&mut rng, dir, 0.25);
                }
            }
            PhantomKind::DendriteLike => {
                let mut pending = vec![(random_point(&mut rng, spec.dims), random_direction(&mut rng))];
                let mut segments = 0;
                while let Some((mut p, mut dir)) = pending.pop() {
                    for _ in 0..200 {
                        let q = [p[0] + 1.5 * dir[0], p[1] + 1.5 * dir[1], p[2] + 1.5 * dir[2]];
                        mask.capsule(p, q, r);
                        segments += 1;
                        if mask.count >= target || !mask.inside(q) || segments > 2000 {
                            break;
                        }
                        if rng.gen_bool(0.06) {
                            pending.push((q, perturb(&mut rng, dir, 1.0)));
                        }
                        p = q;
                        dir = perturb(&mut rng, dir, 0.35);
                    }
                    if mask.count >= target {
                        break;
                    }
                }
            }
        }
    }
    mask
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur_3d(data: &mut [f32], dims: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let len = dims[axis];
        let src = data.to_vec();
        for start in 0..data.len() {
            // visit each line once, from its first element
            if (start / strides[axis]) % len != 0 {
                continue;
            }
            line.clear();
            line.extend((0..len).map(|i| src[start + i * strides[axis]] as f64));
            for i in 0..len {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let idx = (i as isize + j as isize - radius).clamp(0, len as isize - 1) as usize;
                    acc += k * line[idx];
                }
                data[start + i * strides[axis]] = acc as f32;
            }
        }
    }
}

fn render(spec: &PhantomSpec, target: usize) -> Vec<f32> {
    let mask = rasterize(spec, target);
    let mut data: Vec<f32> = mask.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    if spec.smoothness > 0.0 {
        gaussian_blur_3d(&mut data, spec.dims, spec.smoothness);
        let max = data.iter().copied().fold(0.0f32, f32::max);
        if max > 0.0 {
            for v in &mut data {
                *v = (*v / max).clamp(0.0, 1.0);
            }
        }
    }
    data
}

pub fn occupied_fraction(data: &[f32]) -> f64 {
    data.iter().filter(|&&v| v > 0.5).count() as f64 / data.len() as f64
}

/// Deterministic synthetic phantom for `spec`.
///
/// Structures are added until the binary occupancy reaches the target; when
/// blurring moves the thresholded occupancy away from `density`, the binary
/// target is rescaled and the same random sequence is replayed.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let total: usize = spec.dims.iter().product();
    let goal = spec.density * total as f64;
    let mut target = goal.ceil() as usize;
    let mut best: Option<(f64, Vec<f32>)> = None;
    for _ in 0..8 {
        let data = render(spec, target);
        let got = occupied_fraction(&data) * total as f64;
        let err = (got - goal).abs() / goal;
        if best.as_ref().map_or(true, |(e, _)| err < *e) {
            best = Some((err, data));
        }
        if err <= 0.1 || got == 0.0 {
            break;
        }
        target = ((target as f64) * goal / got).round().max(1.0) as usize;
    }
    let (_, data) = best.expect("at least one render");
    let name = format!("{:?}-{}", spec.kind, spec.seed).to_lowercase();
    Volume::new(name, spec.dims, data)
}

/// Averages every `n` consecutive slices; a trailing partial sub-volume is dropped.
pub fn project(v: &Volume, cfg: &AcquisitionConfig) -> Result<ProjectionStack> {
    let n = cfg.step_length;
    let depth = v.depth();
    if n == 0 {
        return Err(Error::InvalidArgument("step length must be >= 1".into()));
    }
    if n > depth {
        return Err(Error::InvalidArgument(format!("step length {n} exceeds depth {depth}")));
    }
    let count = depth / n;
    let (h, w) = (v.height(), v.width());
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
    let noise = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).unwrap());
    let mut projections = Vec::with_capacity(count);
    let mut centers = Vec::with_capacity(count);
    for i in 0..count {
        let mut acc = vec![0.0f64; h * w];
        for k in i * n..(i + 1) * n {
            for (a, &s) in acc.iter_mut().zip(v.slice(k)) {
                *a += s as f64;
            }
        }
        let mut data: Vec<f32> = acc.iter().map(|&a| (a / n as f64) as f32).collect();
        if let Some(dist) = &noise {
            for d in &mut data {
                *d = (*d + dist.sample(&mut noise_rng) as f32).clamp(0.0, 1.0);
            }
        }
        projections.push(Plane::new(h, w, data)?);
        centers.push(axial_center_of_subvolume(i, n, depth)?.value());
    }
    ProjectionStack::new(projections, n, centers, depth)
}
