//! Encoder/decoder between pixel images and latent grids.
//!
//! The default codec is an exactly invertible pixel-patch transform:
//! space-to-depth by the encode factor followed by a fixed orthonormal
//! channel mixing (QR of a seeded Gaussian, frozen, recorded in
//! checkpoints). A PCA-fitted linear autoencoder is available behind the
//! same interface as the `learned` mode.
//!
//! A codec is immutable after construction; concurrent encode/decode calls
//! are safe.

use crate::error::{Error, Result};
use crate::imaging::{Image, CHANNELS};
use crate::math::{orthonormal_columns, Mat, Real};
use crate::util;
use rand::SeedableRng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// Latent representation: `h`×`w` cells of `c` channels, row-major
/// interleaved, all model math operates on this type.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid<T> {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<T>,
}

impl<T: Real> LatentGrid<T> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        LatentGrid {
            h,
            w,
            c,
            data: vec![T::zero(); h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::ShapeMismatch(format!(
                "latent data length {} != {h}x{w}x{c}",
                data.len()
            )));
        }
        Ok(LatentGrid { h, w, c, data })
    }

    #[inline]
    pub fn cell(&self, y: usize, x: usize) -> &[T] {
        let i = (y * self.w + x) * self.c;
        &self.data[i..i + self.c]
    }

    #[inline]
    pub fn cell_mut(&mut self, y: usize, x: usize) -> &mut [T] {
        let i = (y * self.w + x) * self.c;
        &mut self.data[i..i + self.c]
    }

    pub fn same_shape(&self, other: &LatentGrid<T>) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> T {
        crate::math::l2_norm(&self.data)
    }

    /// Gaussian-noise grid from a seeded stream.
    pub fn standard_normal(h: usize, w: usize, c: usize, rng: &mut impl rand::Rng) -> Self {
        let nd = rand_distr::StandardNormal;
        let data = (0..h * w * c)
            .map(|_| T::from_f64(<rand_distr::StandardNormal as Distribution<f64>>::sample(&nd, rng)))
            .collect();
        LatentGrid { h, w, c, data }
    }

    pub fn map_to_f64(&self) -> LatentGrid<f64> {
        LatentGrid {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|v| v.as_f64()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecMode {
    PixelPatch,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    Identity,
    Orthonormal { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Spatial encode factor f: latent extent is pixel extent / f.
    pub factor: usize,
    /// Latent channels. Pixel-patch mode forces `3·f²`.
    pub channels: usize,
    pub mode: CodecMode,
    pub mixing: Mixing,
}

impl CodecConfig {
    pub fn pixel_patch(factor: usize, mixing: Mixing) -> Self {
        CodecConfig {
            factor,
            channels: CHANNELS * factor * factor,
            mode: CodecMode::PixelPatch,
            mixing,
        }
    }

    /// Desk-scale default: f=2, c=12, seeded orthonormal mixing.
    pub fn desk_default() -> Self {
        Self::pixel_patch(2, Mixing::Orthonormal { seed: 0x0d17 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.factor == 0 {
            return Err(Error::Config("codec factor must be >= 1".into()));
        }
        let patch_dim = CHANNELS * self.factor * self.factor;
        match self.mode {
            CodecMode::PixelPatch => {
                if self.channels != patch_dim {
                    return Err(Error::Config(format!(
                        "pixel-patch codec requires channels = 3*f^2 = {patch_dim}, got {}",
                        self.channels
                    )));
                }
            }
            CodecMode::Learned => {
                if self.channels == 0 || self.channels > patch_dim {
                    return Err(Error::Config(format!(
                        "learned codec channels must be in 1..={patch_dim}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn canonical_string(&self) -> String {
        let mix = match self.mixing {
            Mixing::Identity => "identity".to_string(),
            Mixing::Orthonormal { seed } => format!("orthonormal:{seed}"),
        };
        let mode = match self.mode {
            CodecMode::PixelPatch => "pixel_patch",
            CodecMode::Learned => "learned",
        };
        format!(
            "codec(f={},c={},mode={mode},mix={mix})",
            self.factor, self.channels
        )
    }
}

/// PCA basis for the learned codec mode.
#[derive(Debug, Clone)]
pub struct LearnedBasis {
    /// Patch mean, length 3·f².
    pub mean: Vec<f64>,
    /// Orthonormal principal directions as columns: 3·f² × c.
    pub basis: Mat<f64>,
}

#[derive(Debug, Clone)]
pub struct Codec {
    cfg: CodecConfig,
    /// Orthonormal channel mixing for pixel-patch mode (c×c), None = identity.
    mix: Option<Mat<f64>>,
    learned: Option<LearnedBasis>,
}

impl Codec {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        cfg.validate()?;
        match cfg.mode {
            CodecMode::PixelPatch => {
                let mix = match cfg.mixing {
                    Mixing::Identity => None,
                    Mixing::Orthonormal { seed } => Some(mixing_matrix(cfg.channels, seed)),
                };
                Ok(Codec {
                    cfg,
                    mix,
                    learned: None,
                })
            }
            CodecMode::Learned => Err(Error::Config(
                "learned codec must be constructed with fit_learned or from_learned_parts".into(),
            )),
        }
    }

    /// Fit the learned (PCA) codec on patch statistics of `images`.
    pub fn fit_learned(cfg: CodecConfig, images: &[Image]) -> Result<Self> {
        cfg.validate()?;
        if cfg.mode != CodecMode::Learned {
            return Err(Error::Config("fit_learned requires learned mode".into()));
        }
        if images.is_empty() {
            return Err(Error::InvalidInput("fit_learned needs >= 1 image".into()));
        }
        let f = cfg.factor;
        let dim = CHANNELS * f * f;
        let mut mean = vec![0.0f64; dim];
        let mut count = 0usize;
        let mut patches: Vec<Vec<f64>> = Vec::new();
        for img in images {
            if img.height % f != 0 || img.width % f != 0 {
                return Err(Error::ExtentMismatch(format!(
                    "image {}x{} not divisible by factor {f}",
                    img.height, img.width
                )));
            }
            for cy in 0..img.height / f {
                for cx in 0..img.width / f {
                    let mut v = vec![0.0f64; dim];
                    gather_patch(img, f, cy, cx, &mut v);
                    for (m, x) in mean.iter_mut().zip(&v) {
                        *m += x;
                    }
                    count += 1;
                    patches.push(v);
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        let mut cov = Mat::<f64>::zeros(dim, dim);
        for p in &patches {
            for i in 0..dim {
                let ci = p[i] - mean[i];
                for j in i..dim {
                    let v = ci * (p[j] - mean[j]);
                    cov.data[i * dim + j] += v;
                }
            }
        }
        // mirror upper triangle, normalize
        for i in 0..dim {
            for j in i..dim {
                let v = cov.at(i, j) / count as f64;
                cov.set(i, j, v);
                cov.set(j, i, v);
            }
        }
        let (evals, evecs) = crate::math::jacobi_eigh(&cov, true);
        let q = evecs.expect("vectors requested");
        // top `channels` eigenvectors (eigenvalues ascend)
        let c = cfg.channels;
        let basis = Mat::from_fn(dim, c, |i, j| q.at(i, dim - c + j));
        let _ = evals;
        Ok(Codec {
            cfg,
            mix: None,
            learned: Some(LearnedBasis { mean, basis }),
        })
    }

    pub fn from_learned_parts(cfg: CodecConfig, mean: Vec<f64>, basis: Mat<f64>) -> Result<Self> {
        cfg.validate()?;
        let dim = CHANNELS * cfg.factor * cfg.factor;
        if mean.len() != dim || basis.rows != dim || basis.cols != cfg.channels {
            return Err(Error::ShapeMismatch("learned codec parts".into()));
        }
        Ok(Codec {
            cfg,
            mix: None,
            learned: Some(LearnedBasis { mean, basis }),
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn learned_basis(&self) -> Option<&LearnedBasis> {
        self.learned.as_ref()
    }

    /// Latent extent for an image extent.
    pub fn latent_extent(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let f = self.cfg.factor;
        if height % f != 0 || width % f != 0 {
            return Err(Error::ExtentMismatch(format!(
                "image {height}x{width} not divisible by encode factor {f}"
            )));
        }
        Ok((height / f, width / f))
    }

    pub fn encode<T: Real>(&self, img: &Image) -> Result<LatentGrid<T>> {
        let (h, w) = self.latent_extent(img.height, img.width)?;
        let f = self.cfg.factor;
        let c = self.cfg.channels;
        let dim = CHANNELS * f * f;
        let mut out = LatentGrid::zeros(h, w, c);
        let mut patch = vec![0.0f64; dim];
        let mut enc = vec![0.0f64; c];
        for cy in 0..h {
            for cx in 0..w {
                gather_patch(img, f, cy, cx, &mut patch);
                match self.cfg.mode {
                    CodecMode::PixelPatch => match &self.mix {
                        None => enc.copy_from_slice(&patch),
                        Some(q) => {
                            for (i, e) in enc.iter_mut().enumerate() {
                                let mut acc = 0.0;
                                let qrow = q.row(i);
                                for (&qv, &pv) in qrow.iter().zip(&patch) {
                                    acc += qv * pv;
                                }
                                *e = acc;
                            }
                        }
                    },
                    CodecMode::Learned => {
                        let lb = self.learned.as_ref().expect("learned basis");
                        for (i, e) in enc.iter_mut().enumerate() {
                            let mut acc = 0.0;
                            for k in 0..dim {
                                acc += lb.basis.at(k, i) * (patch[k] - lb.mean[k]);
                            }
                            *e = acc;
                        }
                    }
                }
                for (o, &v) in out.cell_mut(cy, cx).iter_mut().zip(&enc) {
                    *o = T::from_f64(v);
                }
            }
        }
        Ok(out)
    }

    /// Decode a latent grid to pixels; output clamped to [0,1].
    pub fn decode<T: Real>(&self, lat: &LatentGrid<T>) -> Result<Image> {
        if lat.c != self.cfg.channels {
            return Err(Error::ShapeMismatch(format!(
                "latent channels {} != codec channels {}",
                lat.c, self.cfg.channels
            )));
        }
        let f = self.cfg.factor;
        let dim = CHANNELS * f * f;
        let height = lat.h * f;
        let width = lat.w * f;
        let mut img = Image::black(height, width);
        let mut patch = vec![0.0f64; dim];
        for cy in 0..lat.h {
            for cx in 0..lat.w {
                let cell: Vec<f64> = lat.cell(cy, cx).iter().map(|v| v.as_f64()).collect();
                match self.cfg.mode {
                    CodecMode::PixelPatch => match &self.mix {
                        None => patch.copy_from_slice(&cell),
                        Some(q) => {
                            // x = Qᵀ y
                            for (k, p) in patch.iter_mut().enumerate() {
                                let mut acc = 0.0;
                                for (i, &yv) in cell.iter().enumerate() {
                                    acc += q.at(i, k) * yv;
                                }
                                *p = acc;
                            }
                        }
                    },
                    CodecMode::Learned => {
                        let lb = self.learned.as_ref().expect("learned basis");
                        for (k, p) in patch.iter_mut().enumerate() {
                            let mut acc = lb.mean[k];
                            for (i, &yv) in cell.iter().enumerate() {
                                acc += lb.basis.at(k, i) * yv;
                            }
                            *p = acc;
                        }
                    }
                }
                scatter_patch(&mut img, f, cy, cx, &patch);
            }
        }
        Ok(img)
    }
}

/// Patch layout: index = (dy*f + dx)*3 + channel.
fn gather_patch(img: &Image, f: usize, cy: usize, cx: usize, out: &mut [f64]) {
    let mut k = 0;
    for dy in 0..f {
        for dx in 0..f {
            let px = img.pixel(cy * f + dy, cx * f + dx);
            out[k] = px[0] as f64;
            out[k + 1] = px[1] as f64;
            out[k + 2] = px[2] as f64;
            k += 3;
        }
    }
}

fn scatter_patch(img: &mut Image, f: usize, cy: usize, cx: usize, patch: &[f64]) {
    let mut k = 0;
    for dy in 0..f {
        for dx in 0..f {
            img.set_pixel(
                cy * f + dy,
                cx * f + dx,
                [
                    patch[k].clamp(0.0, 1.0) as f32,
                    patch[k + 1].clamp(0.0, 1.0) as f32,
                    patch[k + 2].clamp(0.0, 1.0) as f32,
                ],
            );
            k += 3;
        }
    }
}

/// Frozen orthonormal c×c mixing from a seeded Gaussian draw.
pub fn mixing_matrix(c: usize, seed: u64) -> Mat<f64> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let nd = rand_distr::StandardNormal;
    let g = Mat::from_fn(c, c, |_, _| {
        <rand_distr::StandardNormal as Distribution<f64>>::sample(&nd, &mut rng)
    });
    // columns orthonormal => Q (as row-applied operator) has orthonormal rows too
    orthonormal_columns(&g).transpose()
}

/// Raw latent file: u32-LE `h`, u32-LE `w`, then `c` planes of h*w f32-LE.
/// The channel count is implied by the payload size.
pub fn write_latent(lat: &LatentGrid<f32>, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + lat.data.len() * 4);
    buf.extend_from_slice(&(lat.h as u32).to_le_bytes());
    buf.extend_from_slice(&(lat.w as u32).to_le_bytes());
    for ch in 0..lat.c {
        for y in 0..lat.h {
            for x in 0..lat.w {
                buf.extend_from_slice(&lat.cell(y, x)[ch].to_le_bytes());
            }
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_latent(path: &Path) -> Result<LatentGrid<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::Archive(format!(
            "{}: latent file too short",
            path.display()
        )));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let payload = &bytes[8..];
    if h == 0 || w == 0 || payload.len() % 4 != 0 {
        return Err(Error::Archive(format!(
            "{}: malformed latent file",
            path.display()
        )));
    }
    let n = payload.len() / 4;
    if n % (h * w) != 0 {
        return Err(Error::Archive(format!(
            "{}: payload size {} not a multiple of {}x{}",
            path.display(),
            n,
            h,
            w
        )));
    }
    let c = n / (h * w);
    let mut lat = LatentGrid::zeros(h, w, c);
    let mut k = 0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = f32::from_le_bytes(payload[k * 4..k * 4 + 4].try_into().unwrap());
                lat.cell_mut(y, x)[ch] = v;
                k += 1;
            }
        }
    }
    Ok(lat)
}

/// Disk cache of encoded latents keyed by (image content hash, codec config).
#[derive(Debug, Clone)]
pub struct LatentCache {
    dir: PathBuf,
}

impl LatentCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(LatentCache { dir })
    }

    pub fn key(&self, img: &Image, cfg: &CodecConfig) -> String {
        let img_bytes = util::f32_bytes(&img.data);
        let extent = format!("{}x{}", img.height, img.width);
        let h = util::fnv1a64_chunks([
            img_bytes.as_slice(),
            extent.as_bytes(),
            cfg.canonical_string().as_bytes(),
        ]);
        util::hex64(h)
    }

    pub fn get_or_encode(&self, codec: &Codec, img: &Image) -> Result<LatentGrid<f32>> {
        let path = self.dir.join(format!("{}.lat", self.key(img, codec.config())));
        if path.exists() {
            let lat = read_latent(&path)?;
            let (h, w) = codec.latent_extent(img.height, img.width)?;
            if lat.shape() == (h, w, codec.config().channels) {
                return Ok(lat);
            }
            // stale entry: fall through and rewrite
        }
        let lat = codec.encode::<f32>(img)?;
        write_latent(&lat, &path)?;
        Ok(lat)
    }
}
