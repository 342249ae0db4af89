//! Core value types and their on-disk format.
//!
//! A volume is stored as a raw little-endian `f32` payload (`<name>.f32`)
//! next to a JSON sidecar (`<name>.json`) holding dims, voxel size, name and
//! dtype. A projection stack uses the same pair with extra sidecar fields.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for intensities slightly outside `[0, 1]`; they are clamped.
pub const RANGE_SLACK: f32 = 1e-6;

/// Dense 2-D image `[height, width]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("plane {height}x{width} given {} values", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn same_shape(&self, other: &Plane) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Depth coordinate normalised to `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct NormalizedCoordinate(f64);

impl NormalizedCoordinate {
    pub fn new(z: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&z) {
            return Err(Error::Range(format!("normalized coordinate {z} outside [-1, 1]")));
        }
        Ok(Self(z))
    }

    /// Clamps into range instead of failing.
    pub fn clamped(z: f64) -> Self {
        Self(z.clamp(-1.0, 1.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Cell-centred depth of slice `k` of `depth`: `z = -1 + 2 (k + 0.5) / D`.
pub fn slice_depth(k: usize, depth: usize) -> NormalizedCoordinate {
    NormalizedCoordinate(-1.0 + 2.0 * (k as f64 + 0.5) / depth as f64)
}

/// Inverse of [`slice_depth`] as a continuous slice index.
pub fn depth_to_index(z: f64, depth: usize) -> f64 {
    (z + 1.0) * depth as f64 / 2.0 - 0.5
}

/// Normalised depth of the centre of slices `[i n, (i + 1) n)`.
pub fn axial_center_of_subvolume(i: usize, n: usize, depth: usize) -> Result<NormalizedCoordinate> {
    if n == 0 || depth == 0 {
        return Err(Error::InvalidArgument("step length and depth must be >= 1".into()));
    }
    if (i + 1) * n > depth {
        return Err(Error::Range(format!("sub-volume {i} of length {n} exceeds depth {depth}")));
    }
    let center = (i * n) as f64 + (n as f64 - 1.0) / 2.0;
    Ok(NormalizedCoordinate(-1.0 + 2.0 * (center + 0.5) / depth as f64))
}

/// Dense 3-D scalar field `[depth, height, width]` with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    data: Vec<f32>,
    pub voxel_size: Option<[f64; 3]>,
    pub name: String,
}

fn validate_range(data: &mut [f32]) -> Result<()> {
    for (i, v) in data.iter_mut().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("voxel {i} is {v}")));
        }
        if *v < -RANGE_SLACK || *v > 1.0 + RANGE_SLACK {
            return Err(Error::Range(format!("voxel {i} = {v} outside [0, 1]")));
        }
        *v = v.clamp(0.0, 1.0);
    }
    Ok(())
}

impl Volume {
    /// Validates dims, finiteness and range (clamping excursions up to [`RANGE_SLACK`]).
    pub fn new(name: impl Into<String>, dims: [usize; 3], mut data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("volume dims must be >= 1, got {dims:?}")));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Shape(format!("dims {dims:?} given {} values", data.len())));
        }
        validate_range(&mut data)?;
        Ok(Self { dims, data, voxel_size: None, name: name.into() })
    }

    pub fn zeros(name: impl Into<String>, dims: [usize; 3]) -> Result<Self> {
        Self::new(name, dims, vec![0.0; dims.iter().product()])
    }

    pub fn from_fn(name: impl Into<String>, dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    data.push(f(d, h, w));
                }
            }
        }
        Self::new(name, dims, data)
    }

    /// Stacks equally sized planes along depth.
    pub fn from_planes(name: impl Into<String>, planes: &[Plane]) -> Result<Self> {
        let first = planes.first().ok_or_else(|| Error::Shape("no planes".into()))?;
        if planes.iter().any(|p| !p.same_shape(first)) {
            return Err(Error::Shape("planes differ in shape".into()));
        }
        let data = planes.iter().flat_map(|p| p.data.iter().copied()).collect();
        Self::new(name, [planes.len(), first.height, first.width], data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn depth(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn width(&self) -> usize {
        self.dims[2]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.data[(d * self.dims[1] + h) * self.dims[2] + w]
    }

    pub fn slice(&self, k: usize) -> &[f32] {
        let n = self.dims[1] * self.dims[2];
        &self.data[k * n..(k + 1) * n]
    }

    pub fn plane(&self, k: usize) -> Plane {
        Plane { height: self.dims[1], width: self.dims[2], data: self.slice(k).to_vec() }
    }

    pub fn planes(&self) -> Vec<Plane> {
        (0..self.depth()).map(|k| self.plane(k)).collect()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Ordered axial projections of a volume together with their geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionStack {
    projections: Vec<Plane>,
    step_length: usize,
    axial_centers: Vec<f64>,
    source_depth: usize,
}

impl ProjectionStack {
    pub fn new(
        projections: Vec<Plane>,
        step_length: usize,
        axial_centers: Vec<f64>,
        source_depth: usize,
    ) -> Result<Self> {
        if step_length == 0 {
            return Err(Error::InvalidArgument("step length must be >= 1".into()));
        }
        if projections.len() != source_depth / step_length {
            return Err(Error::Shape(format!(
                "{} projections for depth {source_depth} and step {step_length}",
                projections.len()
            )));
        }
        if projections.is_empty() {
            return Err(Error::Shape("projection stack is empty".into()));
        }
        if axial_centers.len() != projections.len() {
            return Err(Error::Shape("one axial center per projection required".into()));
        }
        if axial_centers.windows(2).any(|w| w[0] >= w[1]) || axial_centers.iter().any(|z| !(-1.0..=1.0).contains(z)) {
            return Err(Error::Range("axial centers must be strictly increasing within [-1, 1]".into()));
        }
        let first = &projections[0];
        if projections.iter().any(|p| !p.same_shape(first)) {
            return Err(Error::Shape("projections differ in shape".into()));
        }
        for p in &projections {
            let mut d = p.data.clone();
            validate_range(&mut d)?;
        }
        Ok(Self { projections, step_length, axial_centers, source_depth })
    }

    pub fn projections(&self) -> &[Plane] {
        &self.projections
    }

    pub fn len(&self) -> usize {
        self.projections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projections.is_empty()
    }

    pub fn step_length(&self) -> usize {
        self.step_length
    }

    pub fn axial_centers(&self) -> &[f64] {
        &self.axial_centers
    }

    pub fn source_depth(&self) -> usize {
        self.source_depth
    }

    pub fn height(&self) -> usize {
        self.projections[0].height
    }

    pub fn width(&self) -> usize {
        self.projections[0].width
    }

    /// Projection of the sub-volume that contains slice `k`; trailing slices
    /// beyond the last full sub-volume map to the last projection.
    pub fn index_for_slice(&self, k: usize) -> usize {
        (k / self.step_length).min(self.len() - 1)
    }

    /// Projection of the sub-volume containing depth `z`. A depth on a
    /// sub-volume boundary belongs to the lower-index projection.
    pub fn index_for_depth(&self, z: f64) -> usize {
        let pos = (z + 1.0) * self.source_depth as f64 / 2.0;
        let n = self.step_length as f64;
        let mut i = (pos / n - 1e-9).ceil() as isize - 1;
        if i < 0 {
            i = 0;
        }
        (i as usize).min(self.len() - 1)
    }

    /// Cell-centred depths of the `n` slices inside sub-volume `i`.
    pub fn subvolume_depths(&self, i: usize) -> Vec<f64> {
        (0..self.step_length).map(|k| slice_depth(i * self.step_length + k, self.source_depth).value()).collect()
    }

    pub fn as_volume(&self, name: &str) -> Result<Volume> {
        Volume::from_planes(name, &self.projections)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VolumeMeta {
    dims: [usize; 3],
    voxel_size: Option<[f64; 3]>,
    name: String,
    dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step_length: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    axial_centers: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_depth: Option<usize>,
}

const DTYPE: &str = "f32le";

/// `(payload, sidecar)` paths for a base path; a `.f32`/`.json` extension is ignored.
pub fn artifact_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("f32") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut payload = base.clone().into_os_string();
    payload.push(".f32");
    let mut meta = base.into_os_string();
    meta.push(".json");
    (payload.into(), meta.into())
}

/// Writes `bytes` to a temp file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn encode_payload(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn write_pair(path: &Path, data: &[f32], meta: &VolumeMeta) -> Result<()> {
    let (payload, sidecar) = artifact_paths(path);
    let json = serde_json::to_vec_pretty(meta).map_err(|e| Error::format(&sidecar, e.to_string()))?;
    write_atomic(&payload, &encode_payload(data))?;
    write_atomic(&sidecar, &json)
}

fn read_pair(path: &Path) -> Result<(VolumeMeta, Vec<f32>)> {
    let (payload, sidecar) = artifact_paths(path);
    let json = fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let meta: VolumeMeta = serde_json::from_slice(&json).map_err(|e| Error::format(&sidecar, e.to_string()))?;
    if meta.dtype != DTYPE {
        return Err(Error::format(&sidecar, format!("unsupported dtype {}", meta.dtype)));
    }
    let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    let expected = meta.dims.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            &payload,
            format!("payload has {} bytes, dims {:?} need {expected}", bytes.len(), meta.dims),
        ));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((meta, data))
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    let meta = VolumeMeta {
        dims: v.dims,
        voxel_size: v.voxel_size,
        name: v.name.clone(),
        dtype: DTYPE.into(),
        step_length: None,
        axial_centers: None,
        source_depth: None,
    };
    write_pair(path, &v.data, &meta)
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let (meta, data) = read_pair(path)?;
    let mut v = Volume::new(meta.name, meta.dims, data).map_err(|e| Error::format(path, e.to_string()))?;
    v.voxel_size = meta.voxel_size;
    Ok(v)
}

pub fn save_stack(stack: &ProjectionStack, path: &Path, name: &str) -> Result<()> {
    let v = stack.as_volume(name)?;
    let meta = VolumeMeta {
        dims: v.dims,
        voxel_size: None,
        name: name.into(),
        dtype: DTYPE.into(),
        step_length: Some(stack.step_length),
        axial_centers: Some(stack.axial_centers.clone()),
        source_depth: Some(stack.source_depth),
    };
    write_pair(path, &v.data, &meta)
}

pub fn load_stack(path: &Path) -> Result<ProjectionStack> {
    let (meta, data) = read_pair(path)?;
    let (_, sidecar) = artifact_paths(path);
    let missing = |f: &str| Error::format(&sidecar, format!("missing stack field `{f}`"));
    let step = meta.step_length.ok_or_else(|| missing("step_length"))?;
    let centers = meta.axial_centers.ok_or_else(|| missing("axial_centers"))?;
    let depth = meta.source_depth.ok_or_else(|| missing("source_depth"))?;
    let v = Volume::new(meta.name, meta.dims, data).map_err(|e| Error::format(path, e.to_string()))?;
    ProjectionStack::new(v.planes(), step, centers, depth).map_err(|e| Error::format(path, e.to_string()))
}
