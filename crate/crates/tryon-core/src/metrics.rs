//! Paired (SSIM) and unpaired (FID, KID) evaluation with a pluggable
//! feature extractor, plus report emission.
//!
//! SSIM: mean local SSIM over 7×7 uniform windows fully inside the image,
//! per channel then channel-averaged, C1=(0.01)², C2=(0.03)² on [0,1].
//! FID: ‖μx−μy‖² + tr(Σx + Σy − 2·(ΣxΣy)^½) with 1/(n−1) covariances; the
//! matrix square root comes from a symmetric eigendecomposition of the
//! symmetrized product with eigenvalues clamped at zero.
//! KID: unbiased MMD² with the polynomial kernel (xᵀy/k + 1)³, diagonal
//! terms excluded. Reports carry KID ×1000 under the `kid` key.

use crate::archive::{Archive, ArchiveWriter};
use crate::error::{Error, Result};
use crate::imaging::{bilinear_resize, Image, CHANNELS};
use crate::math::{jacobi_eigh, orthonormal_columns, Mat};
use crate::par;
use rand::SeedableRng;
use rand_distr::Distribution;
use std::collections::BTreeMap;
use std::path::Path;

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Rows of per-image features.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub n: usize,
    pub k: usize,
    pub data: Vec<f32>,
}

impl FeatureSet {
    pub fn new(n: usize, k: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * k {
            return Err(Error::ShapeMismatch(format!(
                "feature data {} != {n}x{k}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature set".into()));
        }
        Ok(FeatureSet { n, k, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.k..(i + 1) * self.k]
    }

    /// Feature files use the tensor-archive container with one `features`
    /// tensor of shape (n, k).
    pub fn write_archive(&self, path: &Path) -> Result<()> {
        let mut w = ArchiveWriter::new();
        w.add_f32("features", vec![self.n, self.k], &self.data);
        w.write(path)
    }

    pub fn read_archive(path: &Path) -> Result<Self> {
        let a = Archive::read(path)?;
        let (shape, data) = a.tensor_f32("features")?;
        if shape.len() != 2 {
            return Err(Error::Archive(format!(
                "{}: features tensor must be 2-D",
                path.display()
            )));
        }
        FeatureSet::new(shape[0], shape[1], data)
    }
}

/// Mean local SSIM between two images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_extent(b) {
        return Err(Error::ExtentMismatch(format!(
            "ssim {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels"
        )));
    }
    let h = a.height;
    let w = a.width;
    let win = SSIM_WINDOW;
    let npix = (win * win) as f64;
    let mut total = 0.0;
    // integral images per channel over a, b, a², b², ab (w+1 × h+1)
    let iw = w + 1;
    for ch in 0..CHANNELS {
        let mut sa = vec![0.0f64; (h + 1) * iw];
        let mut sb = vec![0.0f64; (h + 1) * iw];
        let mut saa = vec![0.0f64; (h + 1) * iw];
        let mut sbb = vec![0.0f64; (h + 1) * iw];
        let mut sab = vec![0.0f64; (h + 1) * iw];
        for y in 0..h {
            for x in 0..w {
                let va = a.data[(y * w + x) * CHANNELS + ch] as f64;
                let vb = b.data[(y * w + x) * CHANNELS + ch] as f64;
                let i = (y + 1) * iw + (x + 1);
                let up = y * iw + (x + 1);
                let left = (y + 1) * iw + x;
                let diag = y * iw + x;
                sa[i] = va + sa[up] + sa[left] - sa[diag];
                sb[i] = vb + sb[up] + sb[left] - sb[diag];
                saa[i] = va * va + saa[up] + saa[left] - saa[diag];
                sbb[i] = vb * vb + sbb[up] + sbb[left] - sbb[diag];
                sab[i] = va * vb + sab[up] + sab[left] - sab[diag];
            }
        }
        let rect = |s: &[f64], y: usize, x: usize| -> f64 {
            s[(y + win) * iw + (x + win)] - s[y * iw + (x + win)] - s[(y + win) * iw + x]
                + s[y * iw + x]
        };
        let mut ch_total = 0.0;
        for y in 0..=(h - win) {
            for x in 0..=(w - win) {
                let ma = rect(&sa, y, x) / npix;
                let mb = rect(&sb, y, x) / npix;
                let va = rect(&saa, y, x) / npix - ma * ma;
                let vb = rect(&sbb, y, x) / npix - mb * mb;
                let cab = rect(&sab, y, x) / npix - ma * mb;
                let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2);
                let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
                ch_total += num / den;
            }
        }
        total += ch_total / ((h - win + 1) * (w - win + 1)) as f64;
    }
    Ok(total / CHANNELS as f64)
}

/// Maps images to feature rows.
pub trait FeatureExtractor: Sync {
    fn extract(&self, imgs: &[Image]) -> Result<FeatureSet>;
    fn id(&self) -> String;
}

pub const DEFAULT_FEATURE_DIM: usize = 64;
const DOWNSAMPLE_SIDE: usize = 16;

/// Default extractor: bilinear downsample to 16×16, flatten, multiply by a
/// fixed seeded orthonormal 64×768 projection. Linear when `clamp_input` is
/// off; images already in [0,1] are unaffected by the clamp.
#[derive(Debug, Clone)]
pub struct DefaultExtractor {
    pub seed: u64,
    pub clamp_input: bool,
}

impl Default for DefaultExtractor {
    fn default() -> Self {
        DefaultExtractor {
            seed: 0xfea7,
            clamp_input: true,
        }
    }
}

impl DefaultExtractor {
    fn projection(&self) -> Mat<f64> {
        let dim = DOWNSAMPLE_SIDE * DOWNSAMPLE_SIDE * CHANNELS;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
        let nd = rand_distr::StandardNormal;
        let g = Mat::from_fn(dim, DEFAULT_FEATURE_DIM, |_, _| {
            <rand_distr::StandardNormal as Distribution<f64>>::sample(&nd, &mut rng)
        });
        orthonormal_columns(&g) // dim × k, orthonormal columns
    }

    /// Raw (unclamped) feature map of one image; linear in pixel values.
    fn features_of(&self, img: &Image, q: &Mat<f64>) -> Result<Vec<f32>> {
        let small = bilinear_resize(img, DOWNSAMPLE_SIDE, DOWNSAMPLE_SIDE)?;
        let flat: Vec<f64> = small
            .data
            .iter()
            .map(|&v| {
                let x = v as f64;
                if self.clamp_input {
                    x.clamp(0.0, 1.0)
                } else {
                    x
                }
            })
            .collect();
        let mut out = vec![0.0f32; DEFAULT_FEATURE_DIM];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, &v) in flat.iter().enumerate() {
                acc += q.at(i, j) * v;
            }
            *o = acc as f32;
        }
        Ok(out)
    }
}

impl FeatureExtractor for DefaultExtractor {
    fn extract(&self, imgs: &[Image]) -> Result<FeatureSet> {
        if imgs.is_empty() {
            return Err(Error::InvalidInput("extract_features on empty list".into()));
        }
        let q = self.projection();
        let rows = par::map_indexed(imgs.len(), |i| self.features_of(&imgs[i], &q));
        let mut data = Vec::with_capacity(imgs.len() * DEFAULT_FEATURE_DIM);
        for r in rows {
            data.extend_from_slice(&r?);
        }
        FeatureSet::new(imgs.len(), DEFAULT_FEATURE_DIM, data)
    }

    fn id(&self) -> String {
        format!("default16x16-k{DEFAULT_FEATURE_DIM}-seed{}", self.seed)
    }
}

pub fn extract_features(imgs: &[Image], extractor: &dyn FeatureExtractor) -> Result<FeatureSet> {
    extractor.extract(imgs)
}

fn mean_and_cov(x: &FeatureSet) -> (Vec<f64>, Mat<f64>) {
    let n = x.n;
    let k = x.k;
    let mut mean = vec![0.0f64; k];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m += v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = Mat::<f64>::zeros(k, k);
    for i in 0..n {
        let row = x.row(i);
        for a in 0..k {
            let ca = row[a] as f64 - mean[a];
            for b in a..k {
                cov.data[a * k + b] += ca * (row[b] as f64 - mean[b]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..k {
        for b in a..k {
            let v = cov.at(a, b) / denom;
            cov.set(a, b, v);
            cov.set(b, a, v);
        }
    }
    (mean, cov)
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(x: &FeatureSet, y: &FeatureSet) -> Result<f64> {
    if x.k != y.k {
        return Err(Error::ShapeMismatch(format!(
            "feature dims differ: {} vs {}",
            x.k, y.k
        )));
    }
    if x.n < 2 || y.n < 2 {
        return Err(Error::InvalidInput("fid needs n >= 2 per side".into()));
    }
    let (mx, cx) = mean_and_cov(x);
    let (my, cy) = mean_and_cov(y);
    let k = x.k;
    let mean_term: f64 = mx
        .iter()
        .zip(&my)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let tr_x: f64 = (0..k).map(|i| cx.at(i, i)).sum();
    let tr_y: f64 = (0..k).map(|i| cy.at(i, i)).sum();
    // tr((Σx Σy)^1/2) via eigenvalues of the symmetrized product, clamped
    let prod = crate::math::mm_nn(&cx, &cy);
    let sym = Mat::from_fn(k, k, |i, j| 0.5 * (prod.at(i, j) + prod.at(j, i)));
    let (evals, _) = jacobi_eigh(&sym, false);
    let tr_sqrt: f64 = evals.iter().map(|&l| l.max(0.0).sqrt()).sum();
    Ok(mean_term + tr_x + tr_y - 2.0 * tr_sqrt)
}

fn poly_kernel(a: &[f32], b: &[f32], k: usize) -> f64 {
    let mut dot = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
    }
    let base = dot / k as f64 + 1.0;
    base * base * base
}

/// Unbiased squared MMD with the polynomial kernel; diagonal excluded.
pub fn kid(x: &FeatureSet, y: &FeatureSet) -> Result<f64> {
    if x.k != y.k {
        return Err(Error::ShapeMismatch(format!(
            "feature dims differ: {} vs {}",
            x.k, y.k
        )));
    }
    if x.n < 2 || y.n < 2 {
        return Err(Error::InvalidInput("kid needs n >= 2 per side".into()));
    }
    let k = x.k;
    let m = x.n;
    let n = y.n;
    // row-parallel partial sums, combined in index order
    let xx: f64 = par::map_indexed(m, |i| {
        let mut acc = 0.0;
        for j in 0..m {
            if j != i {
                acc += poly_kernel(x.row(i), x.row(j), k);
            }
        }
        acc
    })
    .into_iter()
    .sum();
    let yy: f64 = par::map_indexed(n, |i| {
        let mut acc = 0.0;
        for j in 0..n {
            if j != i {
                acc += poly_kernel(y.row(i), y.row(j), k);
            }
        }
        acc
    })
    .into_iter()
    .sum();
    let xy: f64 = par::map_indexed(m, |i| {
        let mut acc = 0.0;
        for j in 0..n {
            acc += poly_kernel(x.row(i), y.row(j), k);
        }
        acc
    })
    .into_iter()
    .sum();
    Ok(xx / (m * (m - 1)) as f64 + yy / (n * (n - 1)) as f64 - 2.0 * xy / (m * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Paired,
    Unpaired,
}

/// Per-run metric report; the `kid` value is KID ×1000.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub run_id: String,
    pub config_hash: String,
    pub split_id: String,
    pub n: usize,
    pub values: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in &self.values {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("metric {k}")));
            }
        }
        if let Some(s) = self.values.get("ssim") {
            if !(-1.0..=1.0).contains(s) {
                return Err(Error::InvalidInput(format!("ssim {s} outside [-1,1]")));
            }
        }
        Ok(())
    }

    /// Flat key=value document, one line per field.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("run_id={}\n", self.run_id));
        out.push_str(&format!("config_hash={}\n", self.config_hash));
        out.push_str(&format!("split_id={}\n", self.split_id));
        out.push_str(&format!("n={}\n", self.n));
        for (k, v) in &self.values {
            out.push_str(&format!("metric.{k}={v}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut run_id = String::new();
        let mut config_hash = String::new();
        let mut split_id = String::new();
        let mut n = 0usize;
        let mut values = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Data(format!("report line {}: missing '='", lineno + 1))
            })?;
            match key {
                "run_id" => run_id = value.to_string(),
                "config_hash" => config_hash = value.to_string(),
                "split_id" => split_id = value.to_string(),
                "n" => {
                    n = value
                        .parse()
                        .map_err(|e| Error::Data(format!("report n: {e}")))?
                }
                _ => {
                    if let Some(name) = key.strip_prefix("metric.") {
                        let v: f64 = value
                            .parse()
                            .map_err(|e| Error::Data(format!("metric {name}: {e}")))?;
                        values.insert(name.to_string(), v);
                    } else {
                        return Err(Error::Data(format!("report line {}: unknown key {key}", lineno + 1)));
                    }
                }
            }
        }
        Ok(MetricReport {
            run_id,
            config_hash,
            split_id,
            n,
            values,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Run metadata needed by the report.
#[derive(Debug, Clone)]
pub struct RunMeta {
    pub run_id: String,
    pub config_hash: String,
    pub split_id: String,
}

/// Paired mode: mean SSIM of generated vs targets. Unpaired: FID and KID
/// between the generated set and the source set.
pub fn evaluate_run(
    generated: &[Image],
    split: &[crate::data::SamplePair],
    extractor: &dyn FeatureExtractor,
    mode: EvalMode,
    meta: &RunMeta,
) -> Result<MetricReport> {
    if generated.is_empty() {
        return Err(Error::InvalidInput("no generated images".into()));
    }
    if generated.len() != split.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} generated vs {} split items",
            generated.len(),
            split.len()
        )));
    }
    let mut values = BTreeMap::new();
    match mode {
        EvalMode::Paired => {
            let mut acc = 0.0;
            for (g, pair) in generated.iter().zip(split) {
                let target = pair.target.as_ref().ok_or_else(|| {
                    Error::InvalidInput("paired evaluation requires targets".into())
                })?;
                acc += ssim(g, target)?;
            }
            values.insert("ssim".to_string(), acc / generated.len() as f64);
        }
        EvalMode::Unpaired => {
            let sources: Vec<Image> = split.iter().map(|p| p.source.clone()).collect();
            let fx = extractor.extract(generated)?;
            let fy = extractor.extract(&sources)?;
            values.insert("fid".to_string(), fid(&fx, &fy)?);
            values.insert("kid".to_string(), kid(&fx, &fy)? * 1000.0);
        }
    }
    let report = MetricReport {
        run_id: meta.run_id.clone(),
        config_hash: meta.config_hash.clone(),
        split_id: meta.split_id.clone(),
        n: generated.len(),
        values,
    };
    report.validate()?;
    Ok(report)
}

/// Gaussian feature set for metric self-tests and oracles.
pub fn gaussian_features(n: usize, k: usize, mean: &[f64], std: f64, seed: u64) -> FeatureSet {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let nd = rand_distr::StandardNormal;
    let mut data = Vec::with_capacity(n * k);
    for _ in 0..n {
        for m in mean.iter().take(k) {
            let z: f64 = <rand_distr::StandardNormal as Distribution<f64>>::sample(&nd, &mut rng);
            data.push((m + std * z) as f32);
        }
    }
    FeatureSet::new(n, k, data).expect("finite by construction")
}
