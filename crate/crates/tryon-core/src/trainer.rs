//! Deterministic training loop: data → conditioning → flow loss → gradients
//! → Adam update, with named seeded streams per randomness concern (data
//! order, time draws, noise endpoints, padding noise), bitwise-reproducible
//! checkpoint/resume, and the configuration-comparison experiment driver.
//!
//! Batch items run in parallel; per-item gradients are reduced in index
//! order and the parameter update is exclusive, so training is bitwise
//! deterministic for any worker count.

use crate::archive::{Archive, ArchiveWriter};
use crate::backbone::{ConditioningMode, ModelConfig, ModelParams, PoseMode, PositionMode};
use crate::codec::{Codec, CodecConfig, CodecMode, LatentCache, LatentGrid, Mixing};
use crate::conditioning::ConditionSet;
use crate::data::{self, SamplePair};
use crate::error::{Error, Result};
use crate::flow::{self, SamplerConfig, Schedule, TimeDistribution};
use crate::imaging::Image;
use crate::metrics::{self, DefaultExtractor, EvalMode, MetricReport, RunMeta};
use crate::par;
use crate::pipeline;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Stream ids on the master seed, one per randomness concern.
const STREAM_DATA: u64 = 0;
const STREAM_TIME: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_PAD: u64 = 3;
const STREAM_INIT: u64 = 4;
const STREAM_EVAL: u64 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub image_size: usize,
    pub bbox_relax_prob: f64,
    pub checkpoint_interval: usize,
    pub time_distribution: TimeDistribution,
    pub model: ModelConfig,
    pub codec: CodecConfig,
    pub sampler: SamplerConfig,
    pub cache_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Desk-scale preset: 64×64 images, f=2/p=2, d=128, depth 6, heads 4.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 8,
            iterations: 2000,
            seed: 0,
            image_size: 64,
            bbox_relax_prob: data::DEFAULT_BBOX_RELAX_PROB,
            checkpoint_interval: 500,
            time_distribution: TimeDistribution::Uniform,
            model: ModelConfig::desk(ConditioningMode::TokenConcat, PoseMode::None),
            codec: CodecConfig::desk_default(),
            sampler: SamplerConfig::default(),
            cache_dir: None,
        }
    }

    /// Reference-scale hyperparameters (not desk-runnable): lr 1e-5,
    /// batch 32, 5000 iterations at 512×512.
    pub fn paper_scale() -> Self {
        let mut cfg = Self::desk();
        cfg.learning_rate = 1e-5;
        cfg.batch_size = 32;
        cfg.iterations = 5000;
        cfg.image_size = 512;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size == 0 || self.image_size == 0 {
            return Err(Error::Config("batch_size/image_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.bbox_relax_prob) {
            return Err(Error::Config("bbox_relax_prob must be in [0,1]".into()));
        }
        self.model.validate()?;
        self.codec.validate()?;
        self.sampler.validate()?;
        if self.model.latent_channels != self.codec.channels {
            return Err(Error::Config(format!(
                "model.latent_channels {} != codec channels {}",
                self.model.latent_channels, self.codec.channels
            )));
        }
        if self.image_size % (self.codec.factor * self.model.patch) != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by factor*patch = {}",
                self.image_size,
                self.codec.factor * self.model.patch
            )));
        }
        Ok(())
    }

    /// Flat key=value rendering; the exact key set the parser accepts.
    pub fn to_text(&self) -> String {
        let td = match self.time_distribution {
            TimeDistribution::Uniform => "uniform".to_string(),
            TimeDistribution::LogitNormal { mean, std } => format!("logit_normal:{mean},{std}"),
        };
        let mixing = match self.codec.mixing {
            Mixing::Identity => ("identity".to_string(), 0u64),
            Mixing::Orthonormal { seed } => ("orthonormal".to_string(), seed),
        };
        let cache = self
            .cache_dir
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "none".into());
        format!(
            "learning_rate={}\nbatch_size={}\niterations={}\nseed={}\nimage_size={}\n\
             bbox_relax_prob={}\ncheckpoint_interval={}\ntime_distribution={}\ncache_dir={}\n\
             config={}\npose={}\n\
             model.depth={}\nmodel.width={}\nmodel.heads={}\nmodel.patch={}\n\
             model.mlp_ratio={}\nmodel.control_depth={}\nmodel.position_mode={}\n\
             model.latent_channels={}\n\
             codec.factor={}\ncodec.channels={}\ncodec.mode={}\ncodec.mixing={}\ncodec.mixing_seed={}\n\
             sampler.steps={}\nsampler.seed={}\n",
            self.learning_rate,
            self.batch_size,
            self.iterations,
            self.seed,
            self.image_size,
            self.bbox_relax_prob,
            self.checkpoint_interval,
            td,
            cache,
            self.model.mode.name(),
            self.model.pose.name(),
            self.model.depth,
            self.model.width,
            self.model.heads,
            self.model.patch,
            self.model.mlp_ratio,
            self.model.control_depth,
            match self.model.position_mode {
                PositionMode::Shared => "shared",
                PositionMode::Offset => "offset",
            },
            self.model.latent_channels,
            self.codec.factor,
            self.codec.channels,
            match self.codec.mode {
                CodecMode::PixelPatch => "pixel_patch",
                CodecMode::Learned => "learned",
            },
            mixing.0,
            mixing.1,
            self.sampler.steps,
            self.sampler.seed,
        )
    }
}

/// Parse a flat key=value config file. Unknown keys are errors (with the
/// line number); missing keys fall back to the desk defaults, reported in
/// the returned list as "key=value" strings.
pub fn parse_config_text(text: &str) -> Result<(TrainConfig, Vec<String>)> {
    let mut cfg = TrainConfig::desk();
    let mut seen: std::collections::BTreeSet<String> = Default::default();
    let mut mixing_kind: Option<String> = None;
    let mut mixing_seed: Option<u64> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        let ctx = |e: String| Error::Config(format!("line {}: key {key}: {e}", lineno + 1));
        macro_rules! num {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|e| ctx(e.to_string()))?
            };
        }
        match key {
            "learning_rate" => cfg.learning_rate = num!(f64),
            "batch_size" => cfg.batch_size = num!(usize),
            "iterations" => cfg.iterations = num!(usize),
            "seed" => cfg.seed = num!(u64),
            "image_size" => cfg.image_size = num!(usize),
            "bbox_relax_prob" => cfg.bbox_relax_prob = num!(f64),
            "checkpoint_interval" => cfg.checkpoint_interval = num!(usize),
            "time_distribution" => {
                cfg.time_distribution = if value == "uniform" {
                    TimeDistribution::Uniform
                } else if let Some(rest) = value.strip_prefix("logit_normal:") {
                    let (m, s) = rest.split_once(',').ok_or_else(|| {
                        ctx("expected logit_normal:<mean>,<std>".into())
                    })?;
                    TimeDistribution::LogitNormal {
                        mean: m.parse().map_err(|e: std::num::ParseFloatError| ctx(e.to_string()))?,
                        std: s.parse().map_err(|e: std::num::ParseFloatError| ctx(e.to_string()))?,
                    }
                } else {
                    return Err(ctx("expected uniform or logit_normal:<mean>,<std>".into()));
                }
            }
            "cache_dir" => {
                cfg.cache_dir = if value == "none" {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            "config" => cfg.model.mode = ConditioningMode::parse(value)?,
            "pose" => cfg.model.pose = PoseMode::parse(value)?,
            "model.depth" => cfg.model.depth = num!(usize),
            "model.width" => cfg.model.width = num!(usize),
            "model.heads" => cfg.model.heads = num!(usize),
            "model.patch" => cfg.model.patch = num!(usize),
            "model.mlp_ratio" => cfg.model.mlp_ratio = num!(f64),
            "model.control_depth" => cfg.model.control_depth = num!(usize),
            "model.position_mode" => cfg.model.position_mode = PositionMode::parse(value)?,
            "model.latent_channels" => cfg.model.latent_channels = num!(usize),
            "codec.factor" => cfg.codec.factor = num!(usize),
            "codec.channels" => cfg.codec.channels = num!(usize),
            "codec.mode" => {
                cfg.codec.mode = match value {
                    "pixel_patch" => CodecMode::PixelPatch,
                    "learned" => CodecMode::Learned,
                    other => return Err(ctx(format!("unknown codec mode '{other}'"))),
                }
            }
            "codec.mixing" => mixing_kind = Some(value.to_string()),
            "codec.mixing_seed" => mixing_seed = Some(num!(u64)),
            "sampler.steps" => cfg.sampler.steps = num!(usize),
            "sampler.seed" => cfg.sampler.seed = num!(u64),
            other => {
                return Err(Error::Config(format!(
                    "line {}: unknown config key '{other}'",
                    lineno + 1
                )))
            }
        }
        seen.insert(key.to_string());
    }
    // resolve mixing after both keys are known
    let default_seed = match cfg.codec.mixing {
        Mixing::Orthonormal { seed } => seed,
        Mixing::Identity => 0,
    };
    match mixing_kind.as_deref() {
        Some("identity") => cfg.codec.mixing = Mixing::Identity,
        Some("orthonormal") => {
            cfg.codec.mixing = Mixing::Orthonormal {
                seed: mixing_seed.unwrap_or(default_seed),
            }
        }
        Some(other) => {
            return Err(Error::Config(format!(
                "codec.mixing: unknown value '{other}'"
            )))
        }
        None => {
            if let Some(seed) = mixing_seed {
                if let Mixing::Orthonormal { .. } = cfg.codec.mixing {
                    cfg.codec.mixing = Mixing::Orthonormal { seed };
                }
            }
        }
    }
    cfg.validate()?;
    let defaults: Vec<String> = TrainConfig::desk()
        .to_text()
        .lines()
        .filter(|l| {
            l.split_once('=')
                .map(|(k, _)| !seen.contains(k))
                .unwrap_or(false)
        })
        .map(|s| s.to_string())
        .collect();
    Ok((cfg, defaults))
}

/// One training-step record, serialized as a structured-text line.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

impl RunRecord {
    pub fn to_line(&self) -> String {
        format!(
            "iter={} loss={} grad_norm={} wall_ms={:.1}",
            self.iteration, self.loss, self.grad_norm, self.wall_ms
        )
    }
}

#[derive(Debug)]
struct Streams {
    data: ChaCha8Rng,
    time: ChaCha8Rng,
    noise: ChaCha8Rng,
    pad: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl Streams {
    fn new(seed: u64) -> Self {
        Streams {
            data: stream(seed, STREAM_DATA),
            time: stream(seed, STREAM_TIME),
            noise: stream(seed, STREAM_NOISE),
            pad: stream(seed, STREAM_PAD),
        }
    }
}

/// Pre-encoded training item: label latent plus conditioning for both mask
/// variants (original and bbox-relaxed).
#[derive(Debug, Clone)]
pub struct PreparedItem {
    pub x_data: LatentGrid<f32>,
    pub cond: ConditionSet<f32>,
    pub cond_relaxed: ConditionSet<f32>,
}

/// Everything a training run owns; save/load round-trips it bitwise.
#[derive(Debug)]
pub struct TrainState {
    pub tcfg: TrainConfig,
    pub params: ModelParams<f32>,
    pub codec: Codec,
    pub adam_m: Vec<f32>,
    pub adam_v: Vec<f32>,
    pub adam_t: u64,
    pub iteration: usize,
    streams: Streams,
}

impl TrainState {
    pub fn new(tcfg: TrainConfig) -> Result<Self> {
        Self::new_with_codec_data(tcfg, &[])
    }

    /// `fit_images` feeds the learned-codec PCA fit; ignored in pixel-patch
    /// mode.
    pub fn new_with_codec_data(tcfg: TrainConfig, fit_images: &[Image]) -> Result<Self> {
        tcfg.validate()?;
        let codec = match tcfg.codec.mode {
            CodecMode::PixelPatch => Codec::new(tcfg.codec)?,
            CodecMode::Learned => Codec::fit_learned(tcfg.codec, fit_images)?,
        };
        let mut init_rng = stream(tcfg.seed, STREAM_INIT);
        let params = ModelParams::<f32>::init(tcfg.model, &mut init_rng)?;
        let n = params.len();
        Ok(TrainState {
            streams: Streams::new(tcfg.seed),
            tcfg,
            params,
            codec,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            adam_t: 0,
            iteration: 0,
        })
    }

    pub fn config_hash(&self) -> String {
        pipeline::config_hash(&self.tcfg.model, &self.tcfg.codec)
    }

    /// Encode pairs once up front (both mask variants). Uses the on-disk
    /// latent cache for label/reference encodes when configured.
    pub fn prepare_items(&self, pairs: &[SamplePair]) -> Result<Vec<PreparedItem>> {
        if pairs.is_empty() {
            return Err(Error::InvalidInput("no training pairs".into()));
        }
        let cache = match &self.tcfg.cache_dir {
            Some(dir) => Some(LatentCache::new(dir)?),
            None => None,
        };
        let size = self.tcfg.image_size;
        let results = par::map_indexed(pairs.len(), |i| -> Result<PreparedItem> {
            let pair = &pairs[i];
            if pair.source.height != size || pair.source.width != size {
                return Err(Error::ExtentMismatch(format!(
                    "pair {i}: {}x{} != configured image_size {size}",
                    pair.source.height, pair.source.width
                )));
            }
            let label_img = pair.target.as_ref().unwrap_or(&pair.source);
            let x_data = match &cache {
                Some(c) => c.get_or_encode(&self.codec, label_img)?,
                None => self.codec.encode::<f32>(label_img)?,
            };
            let cond = pipeline::prepare_conditions(pair, &self.tcfg.model, &self.codec)?;
            let mut relaxed_pair = pair.clone();
            relaxed_pair.mask = crate::imaging::relax_mask_to_bbox(&pair.mask)?;
            let cond_relaxed =
                pipeline::prepare_conditions(&relaxed_pair, &self.tcfg.model, &self.codec)?;
            Ok(PreparedItem {
                x_data,
                cond,
                cond_relaxed,
            })
        });
        results.into_iter().collect()
    }

    /// One optimizer step over a sampled batch. Deterministic given the
    /// stream states; items run in parallel and reduce in index order.
    pub fn step(&mut self, items: &[PreparedItem]) -> Result<RunRecord> {
        if items.is_empty() {
            return Err(Error::InvalidInput("empty batch source".into()));
        }
        let t0 = Instant::now();
        let bs = self.tcfg.batch_size;
        let mut picks = Vec::with_capacity(bs);
        for _ in 0..bs {
            let idx = self.streams.data.random_range(0..items.len());
            let relax = self.streams.data.random::<f64>() < self.tcfg.bbox_relax_prob;
            let t = flow::draw_time(self.tcfg.time_distribution, &mut self.streams.time) as f32;
            let noise_seed = self.streams.noise.next_u64();
            let pad_seed = self.streams.pad.next_u64();
            picks.push((idx, relax, t, noise_seed, pad_seed));
        }
        let params = &self.params;
        let results = par::map_indexed(bs, |i| {
            let (idx, relax, t, noise_seed, pad_seed) = picks[i];
            let item = &items[idx];
            let cond = if relax { &item.cond_relaxed } else { &item.cond };
            let mut nr = ChaCha8Rng::seed_from_u64(noise_seed);
            let mut pr = ChaCha8Rng::seed_from_u64(pad_seed);
            flow::flow_loss_grads(&item.x_data, cond, params, t, &mut nr, &mut pr)
                .map_err(|e| Error::NonFinite(format!("batch item {idx}: {e}")))
        });

        let mut loss = 0.0f64;
        let mut grads = vec![0.0f32; self.params.len()];
        for r in results {
            let (l, g) = r?;
            loss += l as f64;
            for (acc, &v) in grads.iter_mut().zip(&g) {
                *acc += v;
            }
        }
        let inv = 1.0 / bs as f32;
        for g in grads.iter_mut() {
            *g *= inv;
        }
        loss /= bs as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("batch loss at iter {}", self.iteration)));
        }
        let grad_norm = crate::math::l2_norm(&grads) as f64;

        // Adam
        self.adam_t += 1;
        let b1 = ADAM_BETA1 as f32;
        let b2 = ADAM_BETA2 as f32;
        let eps = ADAM_EPS as f32;
        let lr = self.tcfg.learning_rate as f32;
        let bc1 = 1.0 - (ADAM_BETA1).powi(self.adam_t as i32) as f32;
        let bc2 = 1.0 - (ADAM_BETA2).powi(self.adam_t as i32) as f32;
        for ((p, m), (v, &g)) in self
            .params
            .data
            .iter_mut()
            .zip(self.adam_m.iter_mut())
            .zip(self.adam_v.iter_mut().zip(&grads))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
        self.iteration += 1;
        Ok(RunRecord {
            iteration: self.iteration,
            loss,
            grad_norm,
            wall_ms: t0.elapsed().as_secs_f64() * 1000.0,
        })
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = ArchiveWriter::new();
        for e in &self.params.layout.entries {
            w.add_f32(
                format!("param.{}", e.name),
                e.shape.clone(),
                &self.params.data[e.offset..e.offset + e.len()],
            );
            w.add_f32(
                format!("adam_m.{}", e.name),
                e.shape.clone(),
                &self.adam_m[e.offset..e.offset + e.len()],
            );
            w.add_f32(
                format!("adam_v.{}", e.name),
                e.shape.clone(),
                &self.adam_v[e.offset..e.offset + e.len()],
            );
        }
        if let Some(lb) = self.codec.learned_basis() {
            w.add_f64("codec.mean", vec![lb.mean.len()], &lb.mean);
            w.add_f64(
                "codec.basis",
                vec![lb.basis.rows, lb.basis.cols],
                &lb.basis.data,
            );
        }
        w.set_meta(
            "train_config",
            serde_json::to_string(&self.tcfg)
                .map_err(|e| Error::Archive(format!("config encode: {e}")))?,
        );
        w.set_meta("model_config", self.tcfg.model.canonical_json());
        w.set_meta("codec_config", self.tcfg.codec.canonical_string());
        w.set_meta("config_hash", self.config_hash());
        w.set_meta("iteration", self.iteration.to_string());
        w.set_meta("adam_t", self.adam_t.to_string());
        for (name, rng) in [
            ("data", &self.streams.data),
            ("time", &self.streams.time),
            ("noise", &self.streams.noise),
            ("pad", &self.streams.pad),
        ] {
            let seed_hex: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
            w.set_meta(format!("rng.{name}.seed"), seed_hex);
            w.set_meta(format!("rng.{name}.stream"), rng.get_stream().to_string());
            w.set_meta(
                format!("rng.{name}.word_pos"),
                rng.get_word_pos().to_string(),
            );
        }
        w.write(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let a = Archive::read(path)?;
        let tcfg: TrainConfig = serde_json::from_str(a.meta("train_config")?)
            .map_err(|e| Error::Archive(format!("train_config decode: {e}")))?;
        tcfg.validate()?;
        let codec = match tcfg.codec.mode {
            CodecMode::PixelPatch => Codec::new(tcfg.codec)?,
            CodecMode::Learned => {
                let (_, mean) = a.tensor_f64("codec.mean")?;
                let (bshape, bdata) = a.tensor_f64("codec.basis")?;
                let basis = crate::math::Mat::from_vec(bshape[0], bshape[1], bdata);
                Codec::from_learned_parts(tcfg.codec, mean, basis)?
            }
        };
        let mut params = ModelParams::<f32>::zeros(tcfg.model)?;
        let mut adam_m = vec![0.0f32; params.len()];
        let mut adam_v = vec![0.0f32; params.len()];
        let entries = params.layout.entries.clone();
        for e in &entries {
            for (prefix, dst) in [
                ("param", &mut params.data),
                ("adam_m", &mut adam_m),
                ("adam_v", &mut adam_v),
            ] {
                let (shape, vals) = a.tensor_f32(&format!("{prefix}.{}", e.name))?;
                if shape != e.shape {
                    return Err(Error::ShapeMismatch(format!(
                        "checkpoint tensor {prefix}.{} shape {:?} != config shape {:?}",
                        e.name, shape, e.shape
                    )));
                }
                dst[e.offset..e.offset + e.len()].copy_from_slice(&vals);
            }
        }
        let load_rng = |name: &str| -> Result<ChaCha8Rng> {
            let seed_hex = a.meta(&format!("rng.{name}.seed"))?;
            if seed_hex.len() != 64 {
                return Err(Error::Archive(format!("rng.{name}.seed malformed")));
            }
            let mut seed = [0u8; 32];
            for (i, s) in seed.iter_mut().enumerate() {
                *s = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16)
                    .map_err(|e| Error::Archive(format!("rng.{name}.seed: {e}")))?;
            }
            let mut rng = ChaCha8Rng::from_seed(seed);
            let stream: u64 = a
                .meta(&format!("rng.{name}.stream"))?
                .parse()
                .map_err(|e| Error::Archive(format!("rng.{name}.stream: {e}")))?;
            rng.set_stream(stream);
            let pos: u128 = a
                .meta(&format!("rng.{name}.word_pos"))?
                .parse()
                .map_err(|e| Error::Archive(format!("rng.{name}.word_pos: {e}")))?;
            rng.set_word_pos(pos);
            Ok(rng)
        };
        let streams = Streams {
            data: load_rng("data")?,
            time: load_rng("time")?,
            noise: load_rng("noise")?,
            pad: load_rng("pad")?,
        };
        let iteration = a
            .meta("iteration")?
            .parse()
            .map_err(|e| Error::Archive(format!("iteration: {e}")))?;
        let adam_t = a
            .meta("adam_t")?
            .parse()
            .map_err(|e| Error::Archive(format!("adam_t: {e}")))?;
        Ok(TrainState {
            tcfg,
            params,
            codec,
            adam_m,
            adam_v,
            adam_t,
            iteration,
            streams,
        })
    }

    /// Typed guard for resuming: the checkpoint's model config must match
    /// the expectation.
    pub fn load_checkpoint_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let state = Self::load_checkpoint(path)?;
        if state.tcfg.model != *expected {
            return Err(Error::Config(format!(
                "checkpoint model config {} does not match expected {}",
                state.tcfg.model.canonical_json(),
                expected.canonical_json()
            )));
        }
        Ok(state)
    }
}

/// Per-item deterministic seeds for evaluation-time sampling.
pub fn eval_seeds(master_seed: u64, n: usize) -> Vec<u64> {
    let mut rng = stream(master_seed, STREAM_EVAL);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Generate one image per pair (in parallel, order-stable).
pub fn generate_for_split(
    params: &ModelParams<f32>,
    codec: &Codec,
    pairs: &[SamplePair],
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<Image>> {
    par::map_indexed(pairs.len(), |i| {
        pipeline::generate(params, codec, &pairs[i], steps, seeds[i])
    })
    .into_iter()
    .collect()
}

/// Unpaired protocol on a paired split: mismatch garments by rotating the
/// references one position.
pub fn rotate_references(pairs: &[SamplePair]) -> Vec<SamplePair> {
    let n = pairs.len();
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut q = p.clone();
            q.reference = pairs[(i + 1) % n].reference.clone();
            q.target = None;
            q
        })
        .collect()
}

/// Reference ordering from the full-scale comparison (best first).
pub const REFERENCE_CONFIG_ORDER: [ConditioningMode; 3] = [
    ConditioningMode::TokenConcat,
    ConditioningMode::ChannelConcat,
    ConditioningMode::ControlNet,
];

#[derive(Debug)]
pub struct ExperimentOutcome {
    /// One report per configuration, same split metadata.
    pub reports: Vec<MetricReport>,
    /// key=value ordering summary.
    pub summary: String,
    pub trained: Vec<(ConditioningMode, ModelParams<f32>)>,
    pub codec: Codec,
}

/// Train every configuration under the identical budget and seed on one
/// paired split, evaluate paired (SSIM) and unpaired (FID, KID), and emit
/// one comparable report per configuration.
pub fn run_experiment(
    modes: &[ConditioningMode],
    tcfg: &TrainConfig,
    pairs: &[SamplePair],
) -> Result<ExperimentOutcome> {
    if modes.is_empty() {
        return Err(Error::InvalidInput("no configurations requested".into()));
    }
    if pairs.len() < 2 {
        return Err(Error::InvalidInput(
            "experiment needs at least 2 pairs for the unpaired protocol".into(),
        ));
    }
    for (i, p) in pairs.iter().enumerate() {
        if p.target.is_none() {
            return Err(Error::InvalidInput(format!(
                "experiment requires a paired split (pair {i} has no target)"
            )));
        }
    }
    let split = data::split_id(pairs);
    let extractor = DefaultExtractor::default();
    let rotated = rotate_references(pairs);
    let seeds = eval_seeds(tcfg.seed, pairs.len());

    let mut reports = Vec::new();
    let mut trained = Vec::new();
    let mut codec_out = None;
    for &mode in modes {
        let mut tc = tcfg.clone();
        tc.model.mode = mode;
        let mut state = TrainState::new(tc.clone())?;
        let items = state.prepare_items(pairs)?;
        for _ in 0..tc.iterations {
            state.step(&items)?;
        }
        let meta = RunMeta {
            run_id: format!("experiment-{}-pose_{}", mode.name(), tc.model.pose.name()),
            config_hash: state.config_hash(),
            split_id: split.clone(),
        };
        let gen_paired = generate_for_split(&state.params, &state.codec, pairs, tc.sampler.steps, &seeds)?;
        let rep_paired = metrics::evaluate_run(&gen_paired, pairs, &extractor, EvalMode::Paired, &meta)?;
        let gen_unpaired =
            generate_for_split(&state.params, &state.codec, &rotated, tc.sampler.steps, &seeds)?;
        let rep_unpaired =
            metrics::evaluate_run(&gen_unpaired, &rotated, &extractor, EvalMode::Unpaired, &meta)?;
        let mut values = rep_paired.values;
        values.extend(rep_unpaired.values);
        let report = MetricReport {
            run_id: meta.run_id,
            config_hash: meta.config_hash,
            split_id: meta.split_id,
            n: pairs.len(),
            values,
        };
        report.validate()?;
        reports.push(report);
        codec_out = Some(state.codec);
        trained.push((mode, state.params));
    }

    let summary = ordering_summary(modes, &reports);
    Ok(ExperimentOutcome {
        reports,
        summary,
        trained,
        codec: codec_out.expect("at least one mode"),
    })
}

fn order_by<F: Fn(&MetricReport) -> f64>(
    modes: &[ConditioningMode],
    reports: &[MetricReport],
    best_first: F,
) -> Vec<ConditioningMode> {
    let mut idx: Vec<usize> = (0..modes.len()).collect();
    idx.sort_by(|&a, &b| {
        best_first(&reports[a])
            .partial_cmp(&best_first(&reports[b]))
            .unwrap()
    });
    idx.into_iter().map(|i| modes[i]).collect()
}

fn ordering_summary(modes: &[ConditioningMode], reports: &[MetricReport]) -> String {
    let by_fid = order_by(modes, reports, |r| *r.values.get("fid").unwrap_or(&f64::MAX));
    let by_ssim = order_by(modes, reports, |r| {
        -*r.values.get("ssim").unwrap_or(&f64::MIN)
    });
    let fmt = |v: &[ConditioningMode]| {
        v.iter().map(|m| m.name()).collect::<Vec<_>>().join(">")
    };
    let reference: Vec<ConditioningMode> = REFERENCE_CONFIG_ORDER
        .iter()
        .copied()
        .filter(|m| modes.contains(m))
        .collect();
    let matches = by_fid == reference;
    format!(
        "reference_order={}\nobserved_order_by_fid={}\nobserved_order_by_ssim={}\nmatches_reference={}\n",
        fmt(&reference),
        fmt(&by_fid),
        fmt(&by_ssim),
        matches
    )
}
