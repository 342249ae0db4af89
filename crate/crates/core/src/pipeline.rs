//! Experiment configuration, staged pipeline with a resumable manifest, and sweeps.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::acquisition::{generate_phantom, project, AcquisitionConfig, PhantomKind, PhantomSpec};
use crate::baselines::{interp_cubic, interp_linear};
use crate::checkpoint::{file_sha256, load_diffusion, load_inr, save_diffusion, save_inr, sha256_hex};
use crate::diffusion::{reconstruct_volume, train_diffusion, DiffusionConfig, DiffusionModel, DiffusionTrainConfig, FusionMode, InrRegime, PredictionTarget};
use crate::encoding::EncodingConfig;
use crate::error::{Error, Result};
use crate::inr::{train_inr, InrArch, InrTrainConfig, PriorMode};
use crate::metrics::{evaluate, MetricReport};
use crate::plot::line_plot;
use crate::volume::{load_stack, load_volume, save_stack, save_volume, slice_depth, write_atomic, Volume};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Microdiffusion,
    NaiveDiffusion,
    InrOnly,
    Linear,
    Cubic,
}

impl Method {
    pub fn is_diffusion(self) -> bool {
        matches!(self, Method::Microdiffusion | Method::NaiveDiffusion)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub method: Method,
    /// Root seed for INR training, diffusion initialisation, training and sampling.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub phantom: PhantomSpec,
    /// Seed of the phantom used to train the denoiser; defaults to `phantom.seed + 1`.
    #[serde(default)]
    pub train_phantom_seed: Option<u64>,
    pub acquisition: AcquisitionConfig,
    pub inr: InrTrainConfig,
    pub diffusion: DiffusionConfig,
    pub diffusion_train: DiffusionTrainConfig,
    /// Slices sampled per network call during reconstruction.
    #[serde(default = "default_sample_batch")]
    pub sample_batch: usize,
}

fn default_sample_batch() -> usize {
    8
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            method: Method::Microdiffusion,
            seed: 0,
            output_dir: PathBuf::from("runs/microdiffusion"),
            phantom: PhantomSpec { kind: PhantomKind::Tubes, dims: [32, 64, 64], density: 0.02, seed: 1, smoothness: 1.0 },
            train_phantom_seed: None,
            acquisition: AcquisitionConfig::new(4),
            inr: InrTrainConfig {
                arch: InrArch { encoding: EncodingConfig::Gaussian { features: 128, sigma: 1.0 }, hidden: vec![64, 64, 64] },
                ..Default::default()
            },
            diffusion: DiffusionConfig::default(),
            diffusion_train: DiffusionTrainConfig::default(),
            sample_batch: default_sample_batch(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("schema_version {} unsupported (expected {SCHEMA_VERSION})", self.schema_version)));
        }
        self.phantom.validate().map_err(cfg)?;
        let n = self.acquisition.step_length;
        if n == 0 || self.phantom.dims[0] / n < 2 {
            return Err(Error::Config(format!("step_length {n} leaves fewer than 2 projections of depth {}", self.phantom.dims[0])));
        }
        if !(self.acquisition.noise_std >= 0.0 && self.acquisition.noise_std.is_finite()) {
            return Err(Error::Config("noise_std must be >= 0".into()));
        }
        if self.sample_batch == 0 {
            return Err(Error::Config("sample_batch must be >= 1".into()));
        }
        if self.uses_inr() {
            self.inr.validate().map_err(cfg)?;
        }
        if self.method.is_diffusion() {
            self.diffusion.validate().map_err(cfg)?;
            let mode = self.diffusion.prior.mode;
            if self.method == Method::Microdiffusion && mode == PriorMode::Off {
                return Err(Error::Config("microdiffusion requires an INR prior (prior mode is off)".into()));
            }
            if self.method == Method::NaiveDiffusion && mode != PriorMode::Off {
                return Err(Error::Config(format!("naive_diffusion uses no prior, found prior mode {mode:?}")));
            }
            if self.diffusion_train.batch == 0 || !(self.diffusion_train.learning_rate > 0.0) {
                return Err(Error::Config("diffusion_train batch and learning_rate must be positive".into()));
            }
            let probe = DiffusionModel::<f32>::new(&self.diffusion, 0).map_err(cfg)?;
            probe.check_image(self.phantom.dims[1], self.phantom.dims[2]).map_err(cfg)?;
        }
        Ok(())
    }

    pub fn uses_inr(&self) -> bool {
        match self.method {
            Method::InrOnly => true,
            Method::Microdiffusion => self.diffusion.needs_inr(),
            _ => false,
        }
    }

    fn train_phantom(&self) -> PhantomSpec {
        let seed = self.train_phantom_seed.unwrap_or(self.phantom.seed.wrapping_add(1));
        PhantomSpec { seed, ..self.phantom.clone() }
    }

    /// Seeds used by each stochastic stage.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("phantom".into(), self.phantom.seed),
            ("train_phantom".into(), self.train_phantom().seed),
            ("noise".into(), self.acquisition.noise_seed),
            ("inr".into(), self.seed),
            ("diffusion_init".into(), self.seed.wrapping_add(1)),
            ("diffusion_train".into(), self.seed.wrapping_add(2)),
            ("sampling".into(), self.seed.wrapping_add(3)),
        ])
    }

    /// SHA-256 of the canonical JSON form, excluding `output_dir`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().unwrap().remove("output_dir");
        sha256_hex(&serde_json::to_vec(&v).unwrap())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies `key.path=value` overrides; values parse as JSON, falling back to strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut v;
            for part in key.split('.') {
                slot = match slot {
                    Value::Object(map) => {
                        map.get_mut(part).ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?
                    }
                    Value::Array(items) => part
                        .parse::<usize>()
                        .ok()
                        .and_then(|i| items.get_mut(i))
                        .ok_or_else(|| Error::Config(format!("bad index in `{key}`")))?,
                    _ => return Err(Error::Config(format!("`{key}` does not name a config field"))),
                };
            }
            *slot = value;
        }
        serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Named presets: the Table-1 methods followed by the ablation variants.
pub const PRESETS: &[(&str, &str)] = &[
    ("microdiffusion", "INR prior blended into the sampler input (gamma 0.1, neighbouring window)"),
    ("naive_diffusion", "conditional diffusion without any INR prior"),
    ("inr_only", "slices rendered directly from the fitted INR"),
    ("linear", "linear interpolation between projections"),
    ("cubic", "cubic interpolation between projections"),
    ("sincos_encoding", "microdiffusion with sine-cosine positional encodings"),
    ("cross_attention", "microdiffusion with cross-attention condition fusion"),
    ("uniform_mean", "microdiffusion with uniformly weighted prior window"),
    ("no_neighboring", "microdiffusion with the single-slice prior"),
    ("condition_concat", "INR prior as an extra condition block, gamma 0"),
    ("inr_trainable", "microdiffusion with INR updated by the denoising loss"),
    ("inr_joint", "microdiffusion with INR trained jointly on both losses"),
    ("x0_target", "microdiffusion regressing the clean slice"),
];

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    let mut c = ExperimentConfig { output_dir: PathBuf::from(format!("runs/{name}")), ..Default::default() };
    match name {
        "microdiffusion" => {}
        "naive_diffusion" => {
            c.method = Method::NaiveDiffusion;
            c.diffusion.prior.mode = PriorMode::Off;
            c.diffusion.guidance.gamma = 0.0;
        }
        "inr_only" => c.method = Method::InrOnly,
        "linear" => c.method = Method::Linear,
        "cubic" => c.method = Method::Cubic,
        "sincos_encoding" => {
            c.inr.arch.encoding = EncodingConfig::SinCos { num_frequencies: 10, include_input: true };
            c.diffusion.condition.pos_encoding = EncodingConfig::SinCos { num_frequencies: 10, include_input: true };
        }
        "cross_attention" => c.diffusion.fusion = FusionMode::CrossAttention,
        "uniform_mean" => c.diffusion.prior.mode = PriorMode::UniformMean,
        "no_neighboring" => c.diffusion.prior.mode = PriorMode::NoNeighboring,
        "condition_concat" => {
            c.diffusion.prior.mode = PriorMode::ConditionConcat;
            c.diffusion.guidance.gamma = 0.0;
        }
        "inr_trainable" => c.diffusion_train.inr_regime = InrRegime::Trainable,
        "inr_joint" => c.diffusion_train.inr_regime = InrRegime::Joint,
        "x0_target" => c.diffusion.guidance.prediction_target = PredictionTarget::X0,
        _ => return None,
    }
    Some(c)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of the stage configuration and its input artifacts.
    pub key: String,
    /// Artifact file name to SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
    }

    fn artifact_hash(&self, name: &str) -> Option<&String> {
        self.stages.values().find_map(|s| s.artifacts.get(name))
    }
}

pub const MANIFEST: &str = "manifest.json";

/// Pipeline stages in execution order.
pub const STAGES: &[&str] = &["phantom", "acquire", "train-inr", "train-diff", "reconstruct", "evaluate"];

#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    /// Present when the evaluate stage ran or was cached.
    pub report: Option<MetricReport>,
    pub manifest: Manifest,
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

struct Runner<'a> {
    dir: &'a Path,
    manifest: Manifest,
    executed: Vec<String>,
    skipped: Vec<String>,
}

impl Runner<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn stage(&mut self, name: &str, config: Value, inputs: &[&str], outputs: &[&str], run: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let mut input_hashes = BTreeMap::new();
        for i in inputs {
            let h = self.manifest.artifact_hash(i).ok_or_else(|| Error::InvalidArgument(format!("stage {name} input {i} missing")))?;
            input_hashes.insert(i.to_string(), h.clone());
        }
        let key = sha256_hex(&serde_json::to_vec(&json!({ "stage": name, "config": config, "inputs": input_hashes })).unwrap());
        if let Some(rec) = self.manifest.stages.get(name) {
            let intact = rec.key == key
                && outputs.iter().all(|o| rec.artifacts.get(*o).is_some_and(|h| file_sha256(&self.path(o)).ok().as_ref() == Some(h)));
            if intact {
                info!("stage {name}: cached, skipping");
                self.skipped.push(name.into());
                return Ok(());
            }
        }
        info!("stage {name}: running");
        run(self.dir).map_err(|e| e.in_stage(name))?;
        let mut artifacts = BTreeMap::new();
        for o in outputs {
            artifacts.insert(o.to_string(), file_sha256(&self.path(o)).map_err(|e| e.in_stage(name))?);
        }
        self.manifest.stages.insert(name.into(), StageRecord { key, artifacts });
        self.save()?;
        self.executed.push(name.into());
        Ok(())
    }

    fn save(&self) -> Result<()> {
        let json = serde_json::to_vec_pretty(&self.manifest).unwrap();
        write_atomic(&self.path(MANIFEST), &json)
    }
}

fn volume_files(base: &str) -> [String; 2] {
    [format!("{base}.f32"), format!("{base}.json")]
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

/// Runs every stage through `evaluate` (or stops after `until`), reusing cached stages.
pub fn run_pipeline(cfg: &ExperimentConfig, until: Option<&str>) -> Result<PipelineOutcome> {
    cfg.validate()?;
    if let Some(u) = until {
        if !STAGES.contains(&u) {
            return Err(Error::Config(format!("unknown stage `{u}`")));
        }
    }
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_hash = cfg.hash();
    let previous = Manifest::load(&dir.join(MANIFEST)).ok().filter(|m| m.schema_version == SCHEMA_VERSION);
    let mut manifest = Manifest { schema_version: SCHEMA_VERSION, config_hash: config_hash.clone(), seeds: cfg.seeds(), stages: BTreeMap::new() };
    if let Some(prev) = previous {
        manifest.stages = prev.stages;
    }
    let mut r = Runner { dir, manifest, executed: Vec::new(), skipped: Vec::new() };
    let stop = |s: &str| until == Some(s);
    let outcome = |r: Runner, report| PipelineOutcome { report, manifest: r.manifest, executed: r.executed, skipped: r.skipped };

    let diffusion = cfg.method.is_diffusion();
    let [truth_f32, truth_json] = volume_files("phantom");
    let [train_f32, train_json] = volume_files("train_phantom");
    let [stack_f32, stack_json] = volume_files("stack");
    let [tstack_f32, tstack_json] = volume_files("train_stack");
    let [recon_f32, recon_json] = volume_files("reconstruction");

    let mut outs = vec![truth_f32.as_str(), truth_json.as_str()];
    if diffusion {
        outs.extend([train_f32.as_str(), train_json.as_str()]);
    }
    let train_spec = diffusion.then(|| cfg.train_phantom());
    r.stage("phantom", json!({ "phantom": to_value(&cfg.phantom), "train": to_value(&train_spec) }), &[], &outs, |d| {
        save_volume(&generate_phantom(&cfg.phantom)?, &d.join("phantom"))?;
        if let Some(spec) = &train_spec {
            save_volume(&generate_phantom(spec)?, &d.join("train_phantom"))?;
        }
        Ok(())
    })?;
    if stop("phantom") {
        r.save()?;
        return Ok(outcome(r, None));
    }

    let mut ins = outs.clone();
    let mut outs = vec![stack_f32.as_str(), stack_json.as_str()];
    if diffusion {
        outs.extend([tstack_f32.as_str(), tstack_json.as_str()]);
    }
    ins.retain(|f| f.ends_with(".f32"));
    r.stage("acquire", to_value(&cfg.acquisition), &ins, &outs, |d| {
        save_stack(&project(&load_volume(&d.join("phantom"))?, &cfg.acquisition)?, &d.join("stack"), "stack")?;
        if diffusion {
            let train = load_volume(&d.join("train_phantom"))?;
            save_stack(&project(&train, &cfg.acquisition)?, &d.join("train_stack"), "train_stack")?;
        }
        Ok(())
    })?;
    if stop("acquire") {
        r.save()?;
        return Ok(outcome(r, None));
    }

    let inr_cfg = InrTrainConfig { seed: cfg.seed, ..cfg.inr.clone() };
    if cfg.uses_inr() {
        let mut ins = vec![stack_f32.as_str()];
        let mut outs = vec!["inr.ckpt"];
        if diffusion {
            ins.push(tstack_f32.as_str());
            outs.push("inr_train.ckpt");
        }
        r.stage("train-inr", to_value(&inr_cfg), &ins, &outs, |d| {
            let out = train_inr(&load_stack(&d.join("stack"))?, &inr_cfg)?;
            save_inr(&d.join("inr.ckpt"), &out.field, &inr_cfg, &out.loss_history)?;
            if diffusion {
                let out = train_inr(&load_stack(&d.join("train_stack"))?, &inr_cfg)?;
                save_inr(&d.join("inr_train.ckpt"), &out.field, &inr_cfg, &out.loss_history)?;
            }
            Ok(())
        })?;
    }
    if stop("train-inr") {
        r.save()?;
        return Ok(outcome(r, None));
    }

    let seeds = cfg.seeds();
    if diffusion {
        let train_cfg = DiffusionTrainConfig { seed: seeds["diffusion_train"], ..cfg.diffusion_train.clone() };
        let model_cfg = json!({ "diffusion": to_value(&cfg.diffusion), "train": to_value(&train_cfg), "init": seeds["diffusion_init"] });
        let mut ins = vec![train_f32.as_str(), tstack_f32.as_str()];
        if cfg.uses_inr() {
            ins.push("inr_train.ckpt");
        }
        r.stage("train-diff", model_cfg, &ins, &["diffusion.ckpt"], |d| {
            let truth = load_volume(&d.join("train_phantom"))?;
            let stack = load_stack(&d.join("train_stack"))?;
            let mut model = DiffusionModel::<f32>::new(&cfg.diffusion, seeds["diffusion_init"])?;
            let (mut inr, inr_hash) = if cfg.uses_inr() {
                let p = d.join("inr_train.ckpt");
                (Some(load_inr(&p)?.0), Some(file_sha256(&p)?))
            } else {
                (None, None)
            };
            let out = train_diffusion(&mut model, inr.as_mut(), &truth, &stack, &train_cfg, cfg.inr.learning_rate)?;
            save_diffusion(&d.join("diffusion.ckpt"), &model, inr_hash, &out.loss_history)
        })?;
    }
    if stop("train-diff") {
        r.save()?;
        return Ok(outcome(r, None));
    }

    let mut ins = vec![stack_f32.as_str()];
    if cfg.uses_inr() {
        ins.push("inr.ckpt");
    }
    if diffusion {
        ins.push("diffusion.ckpt");
    }
    let recon_cfg = json!({ "method": to_value(&cfg.method), "seed": seeds["sampling"], "batch": cfg.sample_batch });
    r.stage("reconstruct", recon_cfg, &ins, &[&recon_f32, &recon_json], |d| {
        let stack = load_stack(&d.join("stack"))?;
        let depth = stack.source_depth();
        let inr = if cfg.uses_inr() { Some(load_inr(&d.join("inr.ckpt"))?.0) } else { None };
        let v = match cfg.method {
            Method::Linear => interp_linear(&stack, depth)?,
            Method::Cubic => interp_cubic(&stack, depth)?,
            Method::InrOnly => {
                let f = inr.as_ref().unwrap();
                let planes: Vec<_> =
                    (0..depth).map(|k| f.render_slice(slice_depth(k, depth).value(), stack.height(), stack.width())).collect();
                Volume::from_planes("inr_only", &planes)?
            }
            Method::Microdiffusion | Method::NaiveDiffusion => {
                let (model, _) = load_diffusion(&d.join("diffusion.ckpt"))?;
                reconstruct_volume(&model, inr.as_ref(), &stack, depth, seeds["sampling"], cfg.sample_batch)?
            }
        };
        save_volume(&v, &d.join("reconstruction"))
    })?;
    if stop("reconstruct") {
        r.save()?;
        return Ok(outcome(r, None));
    }

    r.stage("evaluate", Value::Null, &[&recon_f32, &truth_f32], &["report.json"], |d| {
        let report = evaluate(&load_volume(&d.join("reconstruction"))?, &load_volume(&d.join("phantom"))?)?;
        let json = serde_json::to_vec_pretty(&report).unwrap();
        write_atomic(&d.join("report.json"), &json)
    })?;
    let report = load_report(&dir.join("report.json"))?;
    r.save()?;
    Ok(outcome(r, Some(report)))
}

pub fn load_report(path: &Path) -> Result<MetricReport> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    StepLength,
    Gamma,
    W,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "step_length" => Ok(Self::StepLength),
            "gamma" => Ok(Self::Gamma),
            "w" => Ok(Self::W),
            _ => Err(Error::Config(format!("`{s}` is not a sweepable axis (step_length, gamma, w)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::StepLength => "step_length",
            Self::Gamma => "gamma",
            Self::W => "w",
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig, value: f64) -> Result<()> {
        match self {
            Self::StepLength => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("step_length {value} must be a positive integer")));
                }
                cfg.acquisition.step_length = value as usize;
            }
            Self::Gamma => cfg.diffusion.guidance.gamma = value,
            Self::W => cfg.diffusion.guidance.w = value,
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub csv: PathBuf,
    pub plots: Vec<PathBuf>,
}

fn value_label(v: f64) -> String {
    let s = format!("{v}");
    s.replace('.', "p")
}

/// One pipeline per value under `base.output_dir/<axis>_<value>`; failed runs are recorded and skipped.
pub fn run_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    base.validate()?;
    let mut configs = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = base.clone();
        axis.apply(&mut c, v)?;
        c.output_dir = base.output_dir.join(format!("{}_{}", axis.name(), value_label(v)));
        configs.push(c);
    }
    let mut rows = Vec::with_capacity(values.len());
    for (c, &v) in configs.iter().zip(values) {
        let row = match run_pipeline(c, None) {
            Ok(o) => SweepRow { value: v, report: o.report, error: None },
            Err(e) => {
                warn!("sweep {}={v} failed: {e}", axis.name());
                SweepRow { value: v, report: None, error: Some(e.to_string()) }
            }
        };
        rows.push(row);
    }
    let metric = |r: &SweepRow, f: fn(&MetricReport) -> f64| r.report.as_ref().map_or(f64::NAN, f);
    let mut csv = format!("{},ssim,psnr,dice,volume_dice,status\n", axis.name());
    for r in &rows {
        let status = r.error.as_deref().map_or("ok".to_string(), |e| format!("\"error: {}\"", e.replace('"', "'")));
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.value,
            metric(r, |m| m.mean_ssim),
            metric(r, |m| m.mean_psnr),
            metric(r, |m| m.mean_dice),
            metric(r, |m| m.volume_dice),
            status
        ));
    }
    let csv_path = base.output_dir.join(format!("sweep_{}.csv", axis.name()));
    write_atomic(&csv_path, csv.as_bytes())?;
    let xs: Vec<f64> = rows.iter().map(|r| r.value).collect();
    let mut plots = Vec::new();
    let metrics: [(&str, fn(&MetricReport) -> f64); 3] = [("ssim", |m| m.mean_ssim), ("psnr", |m| m.mean_psnr), ("dice", |m| m.mean_dice)];
    for (name, f) in metrics {
        let ys: Vec<f64> = rows.iter().map(|r| metric(r, f)).collect();
        let p = base.output_dir.join(format!("sweep_{}_{name}.png", axis.name()));
        line_plot(&p, &xs, &ys)?;
        plots.push(p);
    }
    Ok(SweepReport { axis, rows, csv: csv_path, plots })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(method: &str, dir: &Path) -> ExperimentConfig {
        let mut c = preset(method).unwrap();
        c.output_dir = dir.to_path_buf();
        c.phantom.dims = [16, 16, 16];
        c.phantom.density = 0.05;
        c
    }

    #[test]
    fn every_preset_validates() {
        for (name, _) in PRESETS {
            let c = preset(name).unwrap();
            c.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!(preset("nope").is_none());
    }

    #[test]
    fn invariants_are_enforced() {
        let mut c = preset("microdiffusion").unwrap();
        c.diffusion.prior.mode = PriorMode::Off;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.diffusion.guidance.gamma = 0.0;
        assert!(c.validate().is_err());
        let mut n = preset("naive_diffusion").unwrap();
        n.diffusion.prior.mode = PriorMode::Neighboring;
        assert!(n.validate().is_err());
        let mut s = preset("linear").unwrap();
        s.schema_version = 99;
        assert!(s.validate().is_err());
        let mut l = preset("linear").unwrap();
        l.acquisition.step_length = 17;
        assert!(l.validate().is_err());
        let mut d = preset("microdiffusion").unwrap();
        d.phantom.dims = [32, 30, 30];
        assert!(d.validate().is_err());
    }

    #[test]
    fn overrides_and_json_round_trip() {
        let c = ExperimentConfig::default();
        let o = c
            .with_overrides(&[
                "diffusion.guidance.gamma=0.3".into(),
                "method=linear".into(),
                "phantom.dims.1=32".into(),
                "output_dir=elsewhere".into(),
            ])
            .unwrap();
        assert_eq!(o.diffusion.guidance.gamma, 0.3);
        assert_eq!(o.method, Method::Linear);
        assert_eq!(o.phantom.dims, [32, 32, 64]);
        assert_eq!(o.output_dir, PathBuf::from("elsewhere"));
        assert!(c.with_overrides(&["diffusion.gama=0.3".into()]).is_err());
        assert!(c.with_overrides(&["method".into()]).is_err());
        assert!(c.with_overrides(&["method=fancy".into()]).is_err());
        let text = serde_json::to_string(&o).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), o);
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 1}"#).is_err());
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { output_dir: "x".into(), ..a.clone() };
        let c = ExperimentConfig { seed: 5, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn linear_pipeline_skips_training_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let c = small("linear", dir.path());
        let first = run_pipeline(&c, None).unwrap();
        assert_eq!(first.executed, ["phantom", "acquire", "reconstruct", "evaluate"]);
        assert!(first.report.is_some());
        assert!(!dir.path().join("inr.ckpt").exists());
        let second = run_pipeline(&c, None).unwrap();
        assert!(second.executed.is_empty());
        assert_eq!(second.skipped.len(), 4);
        assert_eq!(first.manifest, second.manifest);
        let cubic = ExperimentConfig { method: Method::Cubic, ..c };
        let third = run_pipeline(&cubic, None).unwrap();
        assert_eq!(third.executed, ["reconstruct", "evaluate"]);
    }

    #[test]
    fn tampered_artifact_is_recomputed() {
        let dir = tempfile::tempdir().unwrap();
        let c = small("linear", dir.path());
        let first = run_pipeline(&c, Some("acquire")).unwrap();
        assert!(first.report.is_none());
        fs::write(dir.path().join("stack.f32"), b"junk").unwrap();
        let again = run_pipeline(&c, None).unwrap();
        assert_eq!(again.executed, ["acquire", "reconstruct", "evaluate"]);
    }

    #[test]
    fn empty_sweep_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(run_sweep(&small("linear", dir.path()), SweepAxis::W, &[]), Err(Error::Config(_))));
        assert!(SweepAxis::parse("depth").is_err());
    }

    #[test]
    fn sweep_records_failures_and_continues() {
        let dir = tempfile::tempdir().unwrap();
        let c = small("linear", dir.path());
        let rep = run_sweep(&c, SweepAxis::StepLength, &[2.0, 4.0, 9.0]).unwrap();
        assert_eq!(rep.rows.len(), 3);
        assert!(rep.rows[0].report.is_some() && rep.rows[1].report.is_some());
        assert!(rep.rows[2].error.is_some());
        let csv = fs::read_to_string(&rep.csv).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(rep.plots.iter().all(|p| p.exists()));
    }
}
