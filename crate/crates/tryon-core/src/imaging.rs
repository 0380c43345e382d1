//! Pixel-space types and operations: RGB images, binary keep-masks, pose
//! maps, mask compositing and bounding-box relaxation, pad/resize geometry,
//! and PNG/JPEG file I/O.
//!
//! Mask polarity is fixed crate-wide to keep=1 / edit=0. External mask files
//! commonly mark the edit region white; [`load_mask`] converts at load time
//! under an explicit [`MaskPolarity`] flag.
//!
//! All operations here are pure functions over immutable inputs and are safe
//! to call concurrently.

use crate::error::{Error, Result};
use std::path::Path;

/// RGB image, channels interleaved, f32 in [0,1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "image data length {} != {}x{}x{}",
                data.len(),
                height,
                width,
                CHANNELS
            )));
        }
        if !data.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(
                "image values must be finite and in [0,1]".into(),
            ));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn black(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_extent(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Binary keep-mask: 1 = preserve source pixel, 0 = region to regenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "mask data length {} != {}x{}",
                data.len(),
                height,
                width
            )));
        }
        if !data.iter().all(|&v| v <= 1) {
            return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn edit_pixel_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0).count()
    }
}

/// Pose skeleton rendered as an RGB image in the fixed colormap of
/// [`crate::data`].
#[derive(Debug, Clone, PartialEq)]
pub struct PoseMap(pub Image);

/// Half-open pixel rectangle: rows `top..bottom`, columns `left..right`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BBox {
    pub fn new(top: usize, left: usize, bottom: usize, right: usize) -> Result<Self> {
        if top >= bottom || left >= right {
            return Err(Error::InvalidInput(format!(
                "degenerate bbox rows {top}..{bottom} cols {left}..{right}"
            )));
        }
        Ok(BBox {
            top,
            left,
            bottom,
            right,
        })
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.bottom && x >= self.left && x < self.right
    }
}

fn check_extent(img: &Image, mask: &Mask) -> Result<()> {
    if img.height != mask.height || img.width != mask.width {
        return Err(Error::ExtentMismatch(format!(
            "image {}x{} vs mask {}x{}",
            img.height, img.width, mask.height, mask.width
        )));
    }
    Ok(())
}

/// Keep source pixels where mask=1, black out the edit region.
pub fn apply_mask(source: &Image, mask: &Mask) -> Result<Image> {
    check_extent(source, mask)?;
    let mut data = source.data.clone();
    for (i, &m) in mask.data.iter().enumerate() {
        if m == 0 {
            data[i * CHANNELS..(i + 1) * CHANNELS].fill(0.0);
        }
    }
    Ok(Image {
        height: source.height,
        width: source.width,
        data,
    })
}

/// Keep source pixels where mask=1, paint the pose map into the edit region.
pub fn pose_stitch(source: &Image, mask: &Mask, pose: &PoseMap) -> Result<Image> {
    check_extent(source, mask)?;
    if !source.same_extent(&pose.0) {
        return Err(Error::ExtentMismatch(format!(
            "image {}x{} vs pose {}x{}",
            source.height, source.width, pose.0.height, pose.0.width
        )));
    }
    let mut data = source.data.clone();
    for (i, &m) in mask.data.iter().enumerate() {
        if m == 0 {
            let s = i * CHANNELS;
            data[s..s + CHANNELS].copy_from_slice(&pose.0.data[s..s + CHANNELS]);
        }
    }
    Ok(Image {
        height: source.height,
        width: source.width,
        data,
    })
}

/// Minimal axis-aligned rectangle covering all edit (0) pixels.
pub fn edit_bbox(mask: &Mask) -> Result<BBox> {
    let mut top = usize::MAX;
    let mut left = usize::MAX;
    let mut bottom = 0usize;
    let mut right = 0usize;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.at(y, x) == 0 {
                top = top.min(y);
                left = left.min(x);
                bottom = bottom.max(y + 1);
                right = right.max(x + 1);
            }
        }
    }
    if top == usize::MAX {
        return Err(Error::InvalidInput("mask has no edit pixels".into()));
    }
    BBox::new(top, left, bottom, right)
}

/// Replace the edit region with its minimal bounding rectangle.
pub fn relax_mask_to_bbox(mask: &Mask) -> Result<Mask> {
    let bb = edit_bbox(mask)?;
    let mut out = Mask::ones(mask.height, mask.width);
    for y in bb.top..bb.bottom {
        for x in bb.left..bb.right {
            out.set(y, x, 0);
        }
    }
    Ok(out)
}

/// Symmetric-pad geometry for squaring an h×w extent: returns
/// `(side, pad_top, pad_left)`; the extra pixel of an odd pad goes to the
/// bottom/right.
fn square_pad(h: usize, w: usize) -> (usize, usize, usize) {
    let side = h.max(w);
    ((side), (side - h) / 2, (side - w) / 2)
}

/// Center-aligned bilinear resample to an arbitrary extent (no padding).
/// Identity when the extent is unchanged.
pub fn bilinear_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if img.height == 0 || img.width == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::InvalidInput("empty image in resize".into()));
    }
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let sy = img.height as f64 / out_h as f64;
    let sx = img.width as f64 / out_w as f64;
    let mut data = vec![0.0f32; out_h * out_w * CHANNELS];
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = (fy - y0 as f64) as f32;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let wx = (fx - x0 as f64) as f32;
            let p00 = img.pixel(y0, x0);
            let p01 = img.pixel(y0, x1);
            let p10 = img.pixel(y1, x0);
            let p11 = img.pixel(y1, x1);
            let o = (oy * out_w + ox) * CHANNELS;
            for c in 0..CHANNELS {
                let top = p00[c] * (1.0 - wx) + p01[c] * wx;
                let bot = p10[c] * (1.0 - wx) + p11[c] * wx;
                data[o + c] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Ok(Image {
        height: out_h,
        width: out_w,
        data,
    })
}

/// Pad the shorter axis symmetrically with black to a square, then bilinear
/// resize to `target`×`target`. Identity for a square input already at
/// `target`.
pub fn pad_resize(img: &Image, target: usize) -> Result<Image> {
    if target == 0 {
        return Err(Error::InvalidInput("pad_resize target must be > 0".into()));
    }
    if img.height == 0 || img.width == 0 {
        return Err(Error::InvalidInput("empty image".into()));
    }
    if img.height == img.width {
        return bilinear_resize(img, target, target);
    }
    let (side, pad_top, pad_left) = square_pad(img.height, img.width);
    let mut sq = Image::black(side, side);
    for y in 0..img.height {
        let src = &img.data[y * img.width * CHANNELS..(y + 1) * img.width * CHANNELS];
        let dst_off = ((y + pad_top) * side + pad_left) * CHANNELS;
        sq.data[dst_off..dst_off + img.width * CHANNELS].copy_from_slice(src);
    }
    bilinear_resize(&sq, target, target)
}

/// Inverse of [`pad_resize`]: resize back to the padded square and crop the
/// pad bands, recovering the original extent.
pub fn unpad_resize(img: &Image, orig_h: usize, orig_w: usize) -> Result<Image> {
    if orig_h == 0 || orig_w == 0 {
        return Err(Error::InvalidInput("empty target extent".into()));
    }
    if img.height == orig_h && img.width == orig_w {
        return Ok(img.clone());
    }
    let (side, pad_top, pad_left) = square_pad(orig_h, orig_w);
    let sq = bilinear_resize(img, side, side)?;
    let mut data = vec![0.0f32; orig_h * orig_w * CHANNELS];
    for y in 0..orig_h {
        let src_off = ((y + pad_top) * side + pad_left) * CHANNELS;
        data[y * orig_w * CHANNELS..(y + 1) * orig_w * CHANNELS]
            .copy_from_slice(&sq.data[src_off..src_off + orig_w * CHANNELS]);
    }
    Ok(Image {
        height: orig_h,
        width: orig_w,
        data,
    })
}

/// Pad/resize a mask alongside its image. Pad bands are keep=1 (nothing to
/// edit there); resampling is area-weighted and re-thresholded at 0.5 with
/// ties resolving to keep.
pub fn mask_pad_resize(mask: &Mask, target: usize) -> Result<Mask> {
    if target == 0 {
        return Err(Error::InvalidInput("target must be > 0".into()));
    }
    if mask.height == mask.width && mask.height == target {
        return Ok(mask.clone());
    }
    let (side, pad_top, pad_left) = square_pad(mask.height, mask.width);
    let mut gray = Image::filled(side, side, [1.0, 1.0, 1.0]);
    for y in 0..mask.height {
        for x in 0..mask.width {
            let v = mask.at(y, x) as f32;
            gray.set_pixel(y + pad_top, x + pad_left, [v, v, v]);
        }
    }
    let resized = bilinear_resize(&gray, target, target)?;
    let mut data = vec![0u8; target * target];
    for (i, d) in data.iter_mut().enumerate() {
        *d = if resized.data[i * CHANNELS] >= 0.5 { 1 } else { 0 };
    }
    Mask::new(target, target, data)
}

/// Area-average each `factor`×`factor` block and threshold at 0.5; a tie
/// (exactly 0.5) resolves to keep=1.
pub fn downsample_mask(mask: &Mask, factor: usize) -> Result<Mask> {
    if factor == 0 {
        return Err(Error::InvalidInput("factor must be >= 1".into()));
    }
    if mask.height % factor != 0 || mask.width % factor != 0 {
        return Err(Error::ExtentMismatch(format!(
            "mask {}x{} not divisible by factor {}",
            mask.height, mask.width, factor
        )));
    }
    let oh = mask.height / factor;
    let ow = mask.width / factor;
    let block = factor * factor;
    let mut data = vec![0u8; oh * ow];
    for by in 0..oh {
        for bx in 0..ow {
            let mut sum = 0usize;
            for dy in 0..factor {
                for dx in 0..factor {
                    sum += mask.at(by * factor + dy, bx * factor + dx) as usize;
                }
            }
            // integer tie rule: mean >= 0.5 <=> 2*sum >= block
            data[by * ow + bx] = if 2 * sum >= block { 1 } else { 0 };
        }
    }
    Mask::new(oh, ow, data)
}

/// Polarity convention of a mask file on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPolarity {
    /// White pixels mark the edit region (the common external convention).
    EditWhite,
    /// White pixels mark the keep region (this crate's in-memory convention).
    KeepWhite,
}

pub fn load_image(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let rgb = dynimg.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data: Vec<f32> = rgb.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Image::new(h, w, data)
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        for c in 0..CHANNELS {
            px.0[c] = (img.data[i * CHANNELS + c].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    buf.save(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Load a mask file (single-channel or RGB; luma thresholded at 128) and
/// convert to keep=1 under the given polarity flag.
pub fn load_mask(path: &Path, polarity: MaskPolarity) -> Result<Mask> {
    let dynimg = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let luma = dynimg.to_luma8();
    let (w, h) = (luma.width() as usize, luma.height() as usize);
    let data: Vec<u8> = luma
        .as_raw()
        .iter()
        .map(|&v| {
            let white = v >= 128;
            let keep = match polarity {
                MaskPolarity::EditWhite => !white,
                MaskPolarity::KeepWhite => white,
            };
            keep as u8
        })
        .collect();
    Mask::new(h, w, data)
}

/// Write a mask as single-channel PNG in the external edit=white convention.
pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let mut buf = image::GrayImage::new(mask.width as u32, mask.height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        px.0[0] = if mask.data[i] == 0 { 255 } else { 0 };
    }
    buf.save(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(h: usize, w: usize) -> Mask {
        let data = (0..h * w)
            .map(|i| (((i / w) + (i % w)) % 2) as u8)
            .collect();
        Mask::new(h, w, data).unwrap()
    }

    fn test_image(h: usize, w: usize) -> Image {
        let mut data = Vec::with_capacity(h * w * 3);
        for i in 0..h * w {
            let v = (i % 17) as f32 / 16.0;
            data.extend_from_slice(&[v, 1.0 - v, (i % 5) as f32 / 4.0]);
        }
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn apply_mask_identity_and_blackout() {
        let img = test_image(4, 5);
        let ones = Mask::ones(4, 5);
        assert_eq!(apply_mask(&img, &ones).unwrap(), img);
        let zeros = Mask::new(4, 5, vec![0; 20]).unwrap();
        let out = apply_mask(&img, &zeros).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_mask_diagonal_2x2() {
        let img = test_image(2, 2);
        let m = Mask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let out = apply_mask(&img, &m).unwrap();
        assert_eq!(out.pixel(0, 0), img.pixel(0, 0));
        assert_eq!(out.pixel(0, 1), [0.0, 0.0, 0.0]);
        assert_eq!(out.pixel(1, 0), [0.0, 0.0, 0.0]);
        assert_eq!(out.pixel(1, 1), img.pixel(1, 1));
    }

    #[test]
    fn apply_mask_extent_mismatch_errors() {
        let img = test_image(4, 4);
        let m = Mask::ones(4, 5);
        assert!(matches!(
            apply_mask(&img, &m),
            Err(Error::ExtentMismatch(_))
        ));
    }

    #[test]
    fn pose_stitch_selects_per_pixel() {
        let img = test_image(6, 6);
        let pose = PoseMap(test_image(6, 6).clone());
        let all1 = Mask::ones(6, 6);
        assert_eq!(pose_stitch(&img, &all1, &pose).unwrap(), img);
        let all0 = Mask::new(6, 6, vec![0; 36]).unwrap();
        assert_eq!(pose_stitch(&img, &all0, &pose).unwrap(), pose.0);
        let cb = checkerboard(6, 6);
        let out = pose_stitch(&img, &cb, &pose).unwrap();
        // loop oracle
        for y in 0..6 {
            for x in 0..6 {
                let want = if cb.at(y, x) == 1 {
                    img.pixel(y, x)
                } else {
                    pose.0.pixel(y, x)
                };
                assert_eq!(out.pixel(y, x), want);
            }
        }
    }

    #[test]
    fn compositing_is_idempotent() {
        let img = test_image(5, 7);
        let cb = checkerboard(5, 7);
        let once = apply_mask(&img, &cb).unwrap();
        let twice = apply_mask(&once, &cb).unwrap();
        assert_eq!(once, twice);
        let pose = PoseMap(test_image(5, 7));
        let s1 = pose_stitch(&img, &cb, &pose).unwrap();
        let s2 = pose_stitch(&s1, &cb, &pose).unwrap();
        assert_eq!(s1, s2);
    }

    #[test]
    fn relax_single_pixel_and_two_corners() {
        let mut m = Mask::ones(8, 10);
        m.set(3, 5, 0);
        let r = relax_mask_to_bbox(&m).unwrap();
        assert_eq!(r, m);

        let mut m2 = Mask::ones(8, 10);
        m2.set(1, 1, 0);
        m2.set(4, 7, 0);
        let r2 = relax_mask_to_bbox(&m2).unwrap();
        // min/max scan oracle: rows 1..=4, cols 1..=7
        for y in 0..8 {
            for x in 0..10 {
                let inside = (1..=4).contains(&y) && (1..=7).contains(&x);
                assert_eq!(r2.at(y, x), if inside { 0 } else { 1 });
            }
        }
    }

    #[test]
    fn relax_rectangular_region_is_fixed_point() {
        let mut m = Mask::ones(9, 9);
        for y in 2..5 {
            for x in 3..8 {
                m.set(y, x, 0);
            }
        }
        assert_eq!(relax_mask_to_bbox(&m).unwrap(), m);
    }

    #[test]
    fn relax_empty_mask_errors() {
        let m = Mask::ones(4, 4);
        assert!(relax_mask_to_bbox(&m).is_err());
    }

    #[test]
    fn pad_resize_identity_and_bands() {
        let img = test_image(16, 16);
        assert_eq!(pad_resize(&img, 16).unwrap(), img);

        // 8x16 -> 16: 4-pixel black bands top and bottom after padding.
        let wide = test_image(8, 16);
        let out = pad_resize(&wide, 16).unwrap();
        assert_eq!(out.height, 16);
        for y in 0..4 {
            for x in 0..16 {
                assert_eq!(out.pixel(y, x), [0.0; 3], "top band row {y}");
                assert_eq!(out.pixel(15 - y, x), [0.0; 3], "bottom band");
            }
        }
    }

    #[test]
    fn pad_resize_preserves_constant_regions() {
        let gray = Image::filled(10, 10, [0.5, 0.5, 0.5]);
        let out = pad_resize(&gray, 30).unwrap();
        for v in &out.data {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn unpad_resize_inverts_extent() {
        let img = test_image(12, 20);
        let padded = pad_resize(&img, 20).unwrap();
        let back = unpad_resize(&padded, 12, 20).unwrap();
        assert_eq!(back.height, 12);
        assert_eq!(back.width, 20);
        // pad/resize at the native side length is lossless
        assert!(back.data.iter().zip(&img.data).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn downsample_mask_rules() {
        let m = Mask::ones(4, 4);
        let d = downsample_mask(&m, 2).unwrap();
        assert!(d.data.iter().all(|&v| v == 1));
        let z = Mask::new(4, 4, vec![0; 16]).unwrap();
        let dz = downsample_mask(&z, 2).unwrap();
        assert!(dz.data.iter().all(|&v| v == 0));
        // 2x2 block [1,1,0,0] averages to exactly 0.5 -> keep by tie rule.
        let tie = Mask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let dt = downsample_mask(&tie, 2).unwrap();
        assert_eq!(dt.data, vec![1]);
        // non-divisible extent errors
        let odd = Mask::ones(3, 4);
        assert!(downsample_mask(&odd, 2).is_err());
    }

    #[test]
    fn bbox_invariants() {
        assert!(BBox::new(2, 2, 2, 5).is_err());
        assert!(BBox::new(0, 0, 1, 1).is_ok());
    }

    #[test]
    fn image_invariants_enforced() {
        assert!(Image::new(2, 2, vec![0.0; 11]).is_err());
        assert!(Image::new(1, 1, vec![0.0, 2.0, 0.5]).is_err());
        assert!(Image::new(1, 1, vec![0.0, f32::NAN, 0.5]).is_err());
        assert!(Mask::new(1, 2, vec![0, 2]).is_err());
    }

    #[test]
    fn mask_file_roundtrip_with_polarity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let mut m = Mask::ones(6, 6);
        m.set(2, 3, 0);
        m.set(2, 4, 0);
        save_mask(&m, &p).unwrap();
        let back = load_mask(&p, MaskPolarity::EditWhite).unwrap();
        assert_eq!(back, m);
        // An all-white file is edit-everywhere: all-zero keep mask after flip.
        let all_edit = Mask::new(3, 3, vec![0; 9]).unwrap();
        let p2 = dir.path().join("w.png");
        save_mask(&all_edit, &p2).unwrap();
        let back2 = load_mask(&p2, MaskPolarity::EditWhite).unwrap();
        assert!(back2.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn image_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.png");
        let img = test_image(9, 7);
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.height, 9);
        assert_eq!(back.width, 7);
        // 8-bit quantization bound
        assert!(img
            .data
            .iter()
            .zip(&back.data)
            .all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-6));
    }
}
