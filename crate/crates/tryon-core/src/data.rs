//! Procedural try-on corpus: renders a stick/ellipse figure wearing a
//! parameterized garment, the garment flat on a plain background, the exact
//! garment-region keep-mask, and a fixed-colormap pose skeleton. Because
//! rendering is a pure function of the spec, the paired target for any other
//! garment is available by re-rendering with that descriptor.
//!
//! Also reads and writes the standard try-on directory layout
//! (image/, cloth/, agnostic-mask/, openpose-img/ plus a pairs manifest).
//!
//! Color ranges are chosen so every garment pixel differs from the
//! garment-free render in the red channel: background red <= 0.30, skin red
//! = 0.95, garment reds in [0.40, 0.88]. The mask-equals-pixel-diff oracle
//! in the tests depends on this separation.

use crate::error::{Error, Result};
use crate::imaging::{
    self, apply_mask, load_image, load_mask, mask_pad_resize, pad_resize, relax_mask_to_bbox,
    save_image, save_mask, Image, Mask, MaskPolarity, PoseMap,
};
use crate::util;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

pub const SKIN: [f32; 3] = [0.95, 0.76, 0.62];
pub const REFERENCE_BG: [f32; 3] = [0.92, 0.92, 0.92];

/// Pose-map colormap: fixed segment and joint colors.
pub const POSE_SHOULDER: [f32; 3] = [1.0, 0.0, 0.0];
pub const POSE_HEAD_NECK: [f32; 3] = [1.0, 1.0, 0.0];
pub const POSE_LEFT_SIDE: [f32; 3] = [0.0, 1.0, 0.0];
pub const POSE_RIGHT_SIDE: [f32; 3] = [0.0, 0.4, 1.0];
pub const POSE_HIP: [f32; 3] = [1.0, 0.0, 1.0];
pub const POSE_JOINT: [f32; 3] = [0.0, 1.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GarmentShape {
    Rect,
    Trapezoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Solid,
    Stripes,
    Dots,
    Glyph,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GarmentDescriptor {
    pub shape: GarmentShape,
    pub base_color: [f32; 3],
    pub pattern: Pattern,
    pub pattern_color: [f32; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FigureParams {
    /// Horizontal center offset as a fraction of image size.
    pub center_jitter: f32,
    /// Arm angles from vertical, radians.
    pub arm_angle_left: f32,
    pub arm_angle_right: f32,
    /// Leg splay from vertical, radians.
    pub leg_spread: f32,
    /// Shoulder/hip half-width fractions.
    pub shoulder_half: f32,
    pub hip_half: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackgroundDescriptor {
    pub color: [f32; 3],
    pub gradient: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub size: usize,
    pub figure: FigureParams,
    pub garment: GarmentDescriptor,
    pub background: BackgroundDescriptor,
    pub seed: u64,
}

/// One data item: inputs plus the optional paired ground truth.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub source: Image,
    pub reference: Image,
    pub mask: Mask,
    pub pose: PoseMap,
    pub target: Option<Image>,
}

impl SamplePair {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.source.height, self.source.width);
        let ok = self.reference.height == h
            && self.reference.width == w
            && self.mask.height == h
            && self.mask.width == w
            && self.pose.0.height == h
            && self.pose.0.width == w
            && self
                .target
                .as_ref()
                .map(|t| t.height == h && t.width == w)
                .unwrap_or(true);
        if !ok {
            return Err(Error::ExtentMismatch("sample pair extents disagree".into()));
        }
        if self.mask.edit_pixel_count() == 0 {
            return Err(Error::InvalidInput(
                "sample mask has no edit region".into(),
            ));
        }
        Ok(())
    }
}

fn sample_garment_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [
        0.40 + 0.48 * rng.random::<f32>(),
        rng.random::<f32>(),
        rng.random::<f32>(),
    ]
}

pub fn sample_garment(rng: &mut ChaCha8Rng) -> GarmentDescriptor {
    let shape = if rng.random::<f32>() < 0.5 {
        GarmentShape::Rect
    } else {
        GarmentShape::Trapezoid
    };
    let base_color = sample_garment_color(rng);
    let pattern = match rng.random_range(0..4u32) {
        0 => Pattern::Solid,
        1 => Pattern::Stripes,
        2 => Pattern::Dots,
        _ => Pattern::Glyph,
    };
    let mut pattern_color = sample_garment_color(rng);
    // keep the pattern visually distinct from the base
    while (0..3).map(|i| (pattern_color[i] - base_color[i]).abs()).sum::<f32>() < 0.4 {
        pattern_color = sample_garment_color(rng);
    }
    GarmentDescriptor {
        shape,
        base_color,
        pattern,
        pattern_color,
    }
}

pub fn sample_spec(size: usize, seed: u64) -> SynthSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let figure = FigureParams {
        center_jitter: (rng.random::<f32>() - 0.5) * 0.06,
        arm_angle_left: 0.2 + 0.6 * rng.random::<f32>(),
        arm_angle_right: 0.2 + 0.6 * rng.random::<f32>(),
        leg_spread: 0.05 + 0.25 * rng.random::<f32>(),
        shoulder_half: 0.12 + 0.04 * rng.random::<f32>(),
        hip_half: 0.09 + 0.04 * rng.random::<f32>(),
    };
    let garment = sample_garment(&mut rng);
    let background = BackgroundDescriptor {
        color: [
            0.05 + 0.25 * rng.random::<f32>(),
            0.1 + 0.8 * rng.random::<f32>(),
            0.1 + 0.8 * rng.random::<f32>(),
        ],
        gradient: rng.random::<f32>() < 0.5,
    };
    SynthSpec {
        size,
        figure,
        garment,
        background,
        seed,
    }
}

struct Skeleton {
    head: (f32, f32),
    lsh: (f32, f32),
    rsh: (f32, f32),
    lhip: (f32, f32),
    rhip: (f32, f32),
}

fn skeleton(spec: &SynthSpec) -> Skeleton {
    let s = spec.size as f32;
    let cx = s * (0.5 + spec.figure.center_jitter);
    let sh_y = s * 0.28;
    let hip_y = s * 0.60;
    let sh = s * spec.figure.shoulder_half;
    let hip = s * spec.figure.hip_half;
    Skeleton {
        head: (cx, s * 0.14),
        lsh: (cx - sh, sh_y),
        rsh: (cx + sh, sh_y),
        lhip: (cx - hip, hip_y),
        rhip: (cx + hip, hip_y),
    }
}

fn draw_background(img: &mut Image, bg: &BackgroundDescriptor) {
    let h = img.height;
    for y in 0..h {
        let f = if bg.gradient {
            1.0 - 0.4 * (y as f32 / h as f32)
        } else {
            1.0
        };
        for x in 0..img.width {
            img.set_pixel(y, x, [bg.color[0] * f, bg.color[1] * f, bg.color[2] * f]);
        }
    }
}

fn draw_disc(img: &mut Image, cx: f32, cy: f32, r: f32, color: [f32; 3]) {
    let y0 = ((cy - r).floor().max(0.0)) as usize;
    let y1 = ((cy + r).ceil() as usize).min(img.height.saturating_sub(1));
    let x0 = ((cx - r).floor().max(0.0)) as usize;
    let x1 = ((cx + r).ceil() as usize).min(img.width.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            if dx * dx + dy * dy <= r * r {
                img.set_pixel(y, x, color);
            }
        }
    }
}

fn draw_segment(img: &mut Image, a: (f32, f32), b: (f32, f32), half_width: f32, color: [f32; 3]) {
    let y0 = (a.1.min(b.1) - half_width).floor().max(0.0) as usize;
    let y1 = ((a.1.max(b.1) + half_width).ceil() as usize).min(img.height.saturating_sub(1));
    let x0 = (a.0.min(b.0) - half_width).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + half_width).ceil() as usize).min(img.width.saturating_sub(1));
    let (ax, ay) = a;
    let (bx, by) = b;
    let vx = bx - ax;
    let vy = by - ay;
    let len2 = vx * vx + vy * vy;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let px = x as f32 - ax;
            let py = y as f32 - ay;
            let t = if len2 > 0.0 {
                ((px * vx + py * vy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let dx = px - t * vx;
            let dy = py - t * vy;
            if dx * dx + dy * dy <= half_width * half_width {
                img.set_pixel(y, x, color);
            }
        }
    }
}

/// Garment quad in source coordinates: horizontal top/bottom edges at the
/// shoulder/hip lines. A rect keeps the shoulder width; a trapezoid widens
/// toward the hips.
struct Quad {
    top: f32,
    bottom: f32,
    cx: f32,
    top_half: f32,
    bottom_half: f32,
}

fn garment_quad(spec: &SynthSpec) -> Quad {
    let sk = skeleton(spec);
    let top_half = (sk.rsh.0 - sk.lsh.0) / 2.0 + spec.size as f32 * 0.02;
    let bottom_half = match spec.garment.shape {
        GarmentShape::Rect => top_half,
        GarmentShape::Trapezoid => top_half * 1.35,
    };
    Quad {
        top: sk.lsh.1,
        bottom: sk.lhip.1,
        cx: (sk.lsh.0 + sk.rsh.0) / 2.0,
        top_half,
        bottom_half,
    }
}

fn quad_rows(quad: &Quad, size: usize) -> Vec<(usize, usize, usize)> {
    let mut rows = Vec::new();
    let y0 = quad.top.round().max(0.0) as usize;
    let y1 = (quad.bottom.round() as usize).min(size - 1);
    for y in y0..=y1 {
        let t = if y1 > y0 {
            (y - y0) as f32 / (y1 - y0) as f32
        } else {
            0.0
        };
        let half = quad.top_half + (quad.bottom_half - quad.top_half) * t;
        let x0 = (quad.cx - half).round().max(0.0) as usize;
        let x1 = ((quad.cx + half).round() as usize).min(size - 1);
        rows.push((y, x0, x1));
    }
    rows
}

fn draw_garment(img: &mut Image, quad: &Quad, g: &GarmentDescriptor) {
    let rows = quad_rows(quad, img.height);
    let (qy0, qx0) = (rows[0].0, rows.iter().map(|r| r.1).min().unwrap());
    let qh = rows.last().unwrap().0 - qy0 + 1;
    let qw = rows.iter().map(|r| r.2).max().unwrap() - qx0 + 1;
    let s = img.height;
    let band = (s / 16).max(2);
    let dot_g = (s / 10).max(3);
    let dot_r = (s / 40).max(1);
    for &(y, x0, x1) in &rows {
        for x in x0..=x1 {
            let ly = y - qy0;
            let lx = x - qx0;
            let is_pattern = match g.pattern {
                Pattern::Solid => false,
                Pattern::Stripes => (ly / band) % 2 == 1,
                Pattern::Dots => {
                    let my = ly % dot_g;
                    let mx = lx % dot_g;
                    let dy = my as i64 - (dot_g / 2) as i64;
                    let dx = mx as i64 - (dot_g / 2) as i64;
                    (dy * dy + dx * dx) as usize <= dot_r * dot_r
                }
                Pattern::Glyph => {
                    // plus-shaped emblem centered in the quad box
                    let cyd = (ly as i64 - (qh / 2) as i64).unsigned_abs() as usize;
                    let cxd = (lx as i64 - (qw / 2) as i64).unsigned_abs() as usize;
                    (cyd <= qh / 8 && cxd <= qw / 3) || (cxd <= qw / 8 && cyd <= qh / 3)
                }
            };
            img.set_pixel(y, x, if is_pattern { g.pattern_color } else { g.base_color });
        }
    }
}

/// Render the figure without the garment (bare torso). The full source is
/// this plus the garment quad drawn last.
fn render_figure(spec: &SynthSpec) -> Image {
    let s = spec.size;
    let sf = s as f32;
    let mut img = Image::black(s, s);
    draw_background(&mut img, &spec.background);
    let sk = skeleton(spec);
    let limb = (sf / 28.0).max(1.0);
    // legs
    let leg_len = sf * 0.3;
    for (hip, dir) in [(sk.lhip, -1.0f32), (sk.rhip, 1.0)] {
        let end = (
            hip.0 + dir * leg_len * spec.figure.leg_spread.sin(),
            hip.1 + leg_len * spec.figure.leg_spread.cos(),
        );
        draw_segment(&mut img, hip, end, limb, SKIN);
    }
    // arms
    let arm_len = sf * 0.24;
    for (shoulder, angle, dir) in [
        (sk.lsh, spec.figure.arm_angle_left, -1.0f32),
        (sk.rsh, spec.figure.arm_angle_right, 1.0),
    ] {
        let end = (
            shoulder.0 + dir * arm_len * angle.sin(),
            shoulder.1 + arm_len * angle.cos(),
        );
        draw_segment(&mut img, shoulder, end, limb, SKIN);
    }
    // torso (bare)
    let torso = Quad {
        top: sk.lsh.1,
        bottom: sk.lhip.1,
        cx: (sk.lsh.0 + sk.rsh.0) / 2.0,
        top_half: (sk.rsh.0 - sk.lsh.0) / 2.0,
        bottom_half: (sk.rhip.0 - sk.lhip.0) / 2.0,
    };
    for (y, x0, x1) in quad_rows(&torso, s) {
        for x in x0..=x1 {
            img.set_pixel(y, x, SKIN);
        }
    }
    // head
    draw_disc(&mut img, sk.head.0, sk.head.1, sf * 0.07, SKIN);
    img
}

fn render_reference(size: usize, g: &GarmentDescriptor) -> Image {
    let mut img = Image::filled(size, size, REFERENCE_BG);
    let sf = size as f32;
    let top_half = sf * 0.24;
    let bottom_half = match g.shape {
        GarmentShape::Rect => top_half,
        GarmentShape::Trapezoid => top_half * 1.35,
    };
    let quad = Quad {
        top: sf * 0.22,
        bottom: sf * 0.78,
        cx: sf * 0.5,
        top_half,
        bottom_half,
    };
    draw_garment(&mut img, &quad, g);
    img
}

fn render_pose(spec: &SynthSpec) -> PoseMap {
    let s = spec.size;
    let sf = s as f32;
    let mut img = Image::black(s, s);
    let sk = skeleton(spec);
    let lw = (sf / 40.0).max(1.0);
    let neck = ((sk.lsh.0 + sk.rsh.0) / 2.0, sk.lsh.1);
    draw_segment(&mut img, sk.head, neck, lw, POSE_HEAD_NECK);
    draw_segment(&mut img, sk.lsh, sk.rsh, lw, POSE_SHOULDER);
    draw_segment(&mut img, sk.lsh, sk.lhip, lw, POSE_LEFT_SIDE);
    draw_segment(&mut img, sk.rsh, sk.rhip, lw, POSE_RIGHT_SIDE);
    draw_segment(&mut img, sk.lhip, sk.rhip, lw, POSE_HIP);
    for j in [sk.head, sk.lsh, sk.rsh, sk.lhip, sk.rhip] {
        draw_disc(&mut img, j.0, j.1, lw * 1.5, POSE_JOINT);
    }
    PoseMap(img)
}

/// Joint coordinates of the rendered skeleton (for bounds checks).
pub fn skeleton_joints(spec: &SynthSpec) -> [(f32, f32); 5] {
    let sk = skeleton(spec);
    [sk.head, sk.lsh, sk.rsh, sk.lhip, sk.rhip]
}

/// Deterministic render of (source, reference, mask, pose); target is None.
pub fn render(spec: &SynthSpec) -> SamplePair {
    let mut source = render_figure(spec);
    let quad = garment_quad(spec);
    draw_garment(&mut source, &quad, &spec.garment);
    let mut mask = Mask::ones(spec.size, spec.size);
    for (y, x0, x1) in quad_rows(&quad, spec.size) {
        for x in x0..=x1 {
            mask.set(y, x, 0);
        }
    }
    SamplePair {
        source,
        reference: render_reference(spec.size, &spec.garment),
        mask,
        pose: render_pose(spec),
        target: None,
    }
}

/// Source re-rendered with a different garment: the procedural ground truth
/// for a garment swap.
pub fn render_with_garment(spec: &SynthSpec, garment: &GarmentDescriptor) -> Image {
    let mut swapped = *spec;
    swapped.garment = *garment;
    let mut img = render_figure(&swapped);
    draw_garment(&mut img, &garment_quad(&swapped), garment);
    img
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMode {
    Paired,
    Unpaired,
}

impl SplitMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(SplitMode::Paired),
            "unpaired" => Ok(SplitMode::Unpaired),
            other => Err(Error::Config(format!(
                "unknown split mode '{other}' (expected paired|unpaired)"
            ))),
        }
    }
}

/// A split item with its generating descriptors retained.
#[derive(Debug, Clone)]
pub struct SplitItem {
    pub pair: SamplePair,
    pub spec: SynthSpec,
    pub reference_garment: GarmentDescriptor,
}

pub fn make_split_items(n: usize, seed: u64, mode: SplitMode, size: usize) -> Result<Vec<SplitItem>> {
    if n == 0 {
        return Err(Error::InvalidInput("split size must be >= 1".into()));
    }
    let mut seed_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(n);
    for _ in 0..n {
        let item_seed = seed_rng.random::<u64>();
        let spec = sample_spec(size, item_seed);
        let mut pair = render(&spec);
        let reference_garment = match mode {
            SplitMode::Paired => {
                pair.target = Some(pair.source.clone());
                spec.garment
            }
            SplitMode::Unpaired => {
                let mut grng = ChaCha8Rng::seed_from_u64(item_seed ^ 0x9e37_79b9_7f4a_7c15);
                let mut other = sample_garment(&mut grng);
                while other == spec.garment {
                    other = sample_garment(&mut grng);
                }
                pair.reference = render_reference(size, &other);
                pair.target = None;
                other
            }
        };
        pair.validate()?;
        items.push(SplitItem {
            pair,
            spec,
            reference_garment,
        });
    }
    Ok(items)
}

/// Paired: reference garment = source garment and target = source.
/// Unpaired: reference garment differs and target is absent.
pub fn make_split(n: usize, seed: u64, mode: SplitMode, size: usize) -> Result<Vec<SamplePair>> {
    Ok(make_split_items(n, seed, mode, size)?
        .into_iter()
        .map(|i| i.pair)
        .collect())
}

/// With probability `prob`, replace the mask with its bounding-box
/// relaxation.
pub fn augment_mask(pair: &SamplePair, prob: f64, rng: &mut impl Rng) -> Result<SamplePair> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::InvalidInput(format!("probability {prob} outside [0,1]")));
    }
    let mut out = pair.clone();
    if rng.random::<f64>() < prob {
        out.mask = relax_mask_to_bbox(&pair.mask)?;
    }
    Ok(out)
}

pub const DEFAULT_BBOX_RELAX_PROB: f64 = 0.5;
pub const PAIRS_MANIFEST: &str = "pairs.txt";

/// Write items in the standard layout. Masks are written in the external
/// edit=white convention; the manifest holds one "<source> <cloth>" line per
/// item.
pub fn write_vton_layout(items: &[SamplePair], root: &Path) -> Result<()> {
    for sub in ["image", "cloth", "agnostic-mask", "openpose-img"] {
        std::fs::create_dir_all(root.join(sub)).map_err(|e| Error::io(root.join(sub), e))?;
    }
    let mut manifest = String::new();
    for (i, pair) in items.iter().enumerate() {
        let name = format!("{i:05}.png");
        save_image(&pair.source, &root.join("image").join(&name))?;
        save_image(&pair.reference, &root.join("cloth").join(&name))?;
        save_mask(&pair.mask, &root.join("agnostic-mask").join(&name))?;
        save_image(&pair.pose.0, &root.join("openpose-img").join(&name))?;
        manifest.push_str(&format!("{name} {name}\n"));
    }
    let mpath = root.join(PAIRS_MANIFEST);
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(mpath, e))
}

/// Load pairs joined by the manifest. All images are pad_resized to `size`;
/// masks are polarity-converted to keep=1. In paired mode the source serves
/// as the target.
pub fn load_vton_layout(root: &Path, size: usize, mode: SplitMode) -> Result<Vec<SamplePair>> {
    let mpath = root.join(PAIRS_MANIFEST);
    let manifest = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let (src, cloth) = match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                return Err(Error::Data(format!(
                    "{}:{}: malformed manifest line '{line}' (expected '<source> <cloth>')",
                    mpath.display(),
                    lineno + 1
                )))
            }
        };
        let need = |sub: &str, name: &str| -> Result<PathBuf> {
            let p = root.join(sub).join(name);
            if !p.exists() {
                return Err(Error::Data(format!(
                    "{}:{}: missing file {}",
                    mpath.display(),
                    lineno + 1,
                    p.display()
                )));
            }
            Ok(p)
        };
        let source = pad_resize(&load_image(&need("image", src)?)?, size)?;
        let reference = pad_resize(&load_image(&need("cloth", cloth)?)?, size)?;
        let mask = mask_pad_resize(
            &load_mask(&need("agnostic-mask", src)?, MaskPolarity::EditWhite)?,
            size,
        )?;
        let pose = PoseMap(pad_resize(&load_image(&need("openpose-img", src)?)?, size)?);
        let target = match mode {
            SplitMode::Paired => Some(source.clone()),
            SplitMode::Unpaired => None,
        };
        let pair = SamplePair {
            source,
            reference,
            mask,
            pose,
            target,
        };
        pair.validate()?;
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Stable content hash of a split (shared across experiment rows).
pub fn split_id(items: &[SamplePair]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in items {
        let chunks = [
            util::f32_bytes(&p.source.data),
            util::f32_bytes(&p.reference.data),
            p.mask.data.clone(),
            util::f32_bytes(&p.pose.0.data),
        ];
        for c in chunks {
            h ^= util::fnv1a64(&c);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    util::hex64(h)
}

/// Compose the masked conditioning image for a pose strategy: plain
/// blackout, or the pose skeleton stitched into the edit region.
pub fn masked_source_image(
    pair: &SamplePair,
    pose_mode: crate::backbone::PoseMode,
) -> Result<Image> {
    match pose_mode {
        crate::backbone::PoseMode::Stitch => imaging::pose_stitch(&pair.source, &pair.mask, &pair.pose),
        _ => apply_mask(&pair.source, &pair.mask),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_deterministic() {
        let spec = sample_spec(64, 7);
        let a = render(&spec);
        let b = render(&spec);
        assert_eq!(a.source, b.source);
        assert_eq!(a.reference, b.reference);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.pose.0, b.pose.0);
    }

    #[test]
    fn mask_equals_pixel_diff_against_garment_free_render() {
        for seed in [1u64, 2, 3, 11, 29] {
            let spec = sample_spec(64, seed);
            let pair = render(&spec);
            let bare = render_figure(&spec);
            for y in 0..64 {
                for x in 0..64 {
                    let differs = pair.source.pixel(y, x) != bare.pixel(y, x);
                    let edited = pair.mask.at(y, x) == 0;
                    assert_eq!(
                        differs, edited,
                        "seed {seed} pixel ({y},{x}): diff={differs} edit={edited}"
                    );
                }
            }
        }
    }

    #[test]
    fn joints_stay_in_bounds_over_many_seeds() {
        for seed in 0..1000u64 {
            let spec = sample_spec(64, seed);
            for (x, y) in skeleton_joints(&spec) {
                assert!(x >= 0.0 && x < 64.0 && y >= 0.0 && y < 64.0, "seed {seed}");
            }
        }
    }

    #[test]
    fn pairs_satisfy_invariants_over_many_seeds() {
        for seed in 0..1000u64 {
            let spec = sample_spec(32, seed);
            let pair = render(&spec);
            // validate() needs a nonempty edit region and equal extents;
            // image constructors enforced [0,1] fin-ness already.
            pair.validate().unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        }
    }

    #[test]
    fn paired_split_target_is_source() {
        let items = make_split(4, 5, SplitMode::Paired, 32).unwrap();
        for p in &items {
            assert_eq!(p.target.as_ref().unwrap(), &p.source);
        }
    }

    #[test]
    fn unpaired_split_reference_differs() {
        let items = make_split_items(16, 9, SplitMode::Unpaired, 32).unwrap();
        for it in &items {
            assert_ne!(it.reference_garment, it.spec.garment);
            assert!(it.pair.target.is_none());
        }
    }

    #[test]
    fn splits_are_reproducible() {
        let a = make_split(3, 42, SplitMode::Paired, 32).unwrap();
        let b = make_split(3, 42, SplitMode::Paired, 32).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.source, y.source);
            assert_eq!(x.reference, y.reference);
        }
        let c = make_split(3, 43, SplitMode::Paired, 32).unwrap();
        assert_ne!(a[0].source, c[0].source);
    }

    #[test]
    fn swap_consistency_oracle() {
        // render(spec with garment B) equals the target produced by swapping
        // descriptors directly.
        let spec_a = sample_spec(48, 100);
        let spec_b = sample_spec(48, 101);
        let swapped = render_with_garment(&spec_a, &spec_b.garment);
        let mut spec_direct = spec_a;
        spec_direct.garment = spec_b.garment;
        let direct = render(&spec_direct);
        assert_eq!(swapped, direct.source);
    }

    #[test]
    fn augment_mask_probability_extremes() {
        let spec = sample_spec(32, 3);
        let mut pair = render(&spec);
        pair.target = Some(pair.source.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let unchanged = augment_mask(&pair, 0.0, &mut rng).unwrap();
        assert_eq!(unchanged.mask, pair.mask);
        let relaxed = augment_mask(&pair, 1.0, &mut rng).unwrap();
        // rectangularity: the edit region equals its bbox
        let bb = crate::imaging::edit_bbox(&relaxed.mask).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                let inside = bb.contains(y, x);
                assert_eq!(relaxed.mask.at(y, x) == 0, inside);
            }
        }
        assert!((DEFAULT_BBOX_RELAX_PROB - 0.5).abs() < 1e-12);
    }

    #[test]
    fn layout_roundtrip_preserves_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let items = make_split(3, 77, SplitMode::Paired, 32).unwrap();
        write_vton_layout(&items, dir.path()).unwrap();
        let back = load_vton_layout(dir.path(), 32, SplitMode::Paired).unwrap();
        assert_eq!(back.len(), 3);
        for (orig, loaded) in items.iter().zip(&back) {
            // same extent, so pad_resize was the identity; PNG quantization
            // is the only loss
            let max = orig
                .source
                .data
                .iter()
                .zip(&loaded.source.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max <= 0.5 / 255.0 + 1e-6);
            assert_eq!(orig.mask, loaded.mask);
        }
    }

    #[test]
    fn loader_error_contracts() {
        let dir = tempfile::tempdir().unwrap();
        // empty manifest -> empty list
        for sub in ["image", "cloth", "agnostic-mask", "openpose-img"] {
            std::fs::create_dir_all(dir.path().join(sub)).unwrap();
        }
        std::fs::write(dir.path().join(PAIRS_MANIFEST), "").unwrap();
        let empty = load_vton_layout(dir.path(), 32, SplitMode::Paired).unwrap();
        assert!(empty.is_empty());

        // malformed line reports the line number
        std::fs::write(dir.path().join(PAIRS_MANIFEST), "only_one_field\n").unwrap();
        let err = load_vton_layout(dir.path(), 32, SplitMode::Paired).unwrap_err();
        assert!(err.to_string().contains(":1:"), "{err}");

        // missing cloth file is named
        std::fs::write(dir.path().join(PAIRS_MANIFEST), "a.png b.png\n").unwrap();
        let items = make_split(1, 1, SplitMode::Paired, 32).unwrap();
        save_image(&items[0].source, &dir.path().join("image/a.png")).unwrap();
        let err = load_vton_layout(dir.path(), 32, SplitMode::Paired).unwrap_err();
        assert!(err.to_string().contains("b.png"), "{err}");
    }

    #[test]
    fn split_id_is_stable_and_content_sensitive() {
        let a = make_split(2, 5, SplitMode::Paired, 32).unwrap();
        let b = make_split(2, 5, SplitMode::Paired, 32).unwrap();
        assert_eq!(split_id(&a), split_id(&b));
        let c = make_split(2, 6, SplitMode::Paired, 32).unwrap();
        assert_ne!(split_id(&a), split_id(&c));
    }

    #[test]
    fn pose_stitch_composition_for_masked_source() {
        let spec = sample_spec(32, 8);
        let pair = render(&spec);
        let stitched = masked_source_image(&pair, crate::backbone::PoseMode::Stitch).unwrap();
        let black = masked_source_image(&pair, crate::backbone::PoseMode::None).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                if pair.mask.at(y, x) == 1 {
                    assert_eq!(stitched.pixel(y, x), pair.source.pixel(y, x));
                    assert_eq!(black.pixel(y, x), pair.source.pixel(y, x));
                } else {
                    assert_eq!(stitched.pixel(y, x), pair.pose.0.pixel(y, x));
                    assert_eq!(black.pixel(y, x), [0.0; 3]);
                }
            }
        }
    }
}
