//! Image preprocessing: resizing, [0,1] normalization and the seeded
//! augmentation chain applied ahead of training and inference.
//!
//! The augmentation order is fixed: rotate, horizontal flip, crop-and-resize,
//! brightness shift, contrast scale about the image mean, final clamp.
//! A draw ([`AugmentDraw`]) carries every random decision for one sample, so
//! the transform itself is a pure function. Content-aware cropping is not
//! implemented; cropping is a random window of `crop_fraction`.

use crate::config::defaults;
use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Pixel value domain of an [`ImageTensor`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueRange {
    /// Raw 8-bit values in [0, 255].
    Byte,
    /// Normalized values in [0, 1].
    Unit,
}

/// An H x W x 3 image with an explicit value-range tag.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f64>,
    pub range: ValueRange,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>, range: ValueRange) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::Preprocess("image dimensions must be positive".into()));
        }
        if c != 3 {
            return Err(Error::Preprocess(format!("expected 3 channels, got {c}")));
        }
        Ok(ImageTensor { data, range })
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    /// Decode an image file into a byte-range tensor.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })?
            .into_rgb8();
        Ok(Self::from_rgb8(&img))
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let mut data = Array3::zeros((h as usize, w as usize, 3));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[y as usize, x as usize, c]] = px.0[c] as f64;
            }
        }
        ImageTensor { data, range: ValueRange::Byte }
    }

    /// Render a unit-range tensor as an 8-bit RGB image.
    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        if self.range != ValueRange::Unit {
            return Err(Error::Preprocess("to_rgb8 expects a unit-range image".into()));
        }
        let (h, w, _) = self.data.dim();
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [0, 1, 2].map(|c| {
                    (self.data[[y, x, c]].clamp(0.0, 1.0) * 255.0).round() as u8
                });
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        Ok(img)
    }
}

/// Fold an out-of-range coordinate back into [0, n) by mirror reflection
/// (edge pixel not repeated).
fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// Bilinear resize of a single 2-D plane using half-pixel centers.
pub fn resize_plane(plane: &Array2<f64>, target: (usize, usize)) -> Array2<f64> {
    let (sh, sw) = plane.dim();
    let (th, tw) = target;
    if (sh, sw) == (th, tw) {
        return plane.clone();
    }
    let sy = sh as f64 / th as f64;
    let sx = sw as f64 / tw as f64;
    Array2::from_shape_fn((th, tw), |(y, x)| {
        let src_y = (y as f64 + 0.5) * sy - 0.5;
        let src_x = (x as f64 + 0.5) * sx - 0.5;
        let y0 = src_y.floor();
        let x0 = src_x.floor();
        let ty = src_y - y0;
        let tx = src_x - x0;
        let yi0 = (y0 as i64).clamp(0, sh as i64 - 1) as usize;
        let yi1 = (y0 as i64 + 1).clamp(0, sh as i64 - 1) as usize;
        let xi0 = (x0 as i64).clamp(0, sw as i64 - 1) as usize;
        let xi1 = (x0 as i64 + 1).clamp(0, sw as i64 - 1) as usize;
        (1.0 - ty) * ((1.0 - tx) * plane[[yi0, xi0]] + tx * plane[[yi0, xi1]])
            + ty * ((1.0 - tx) * plane[[yi1, xi0]] + tx * plane[[yi1, xi1]])
    })
}

/// Bilinear resize to `target` = (height, width). The value range is
/// preserved; resizing to the source dimensions is the identity.
pub fn resize(img: &ImageTensor, target: (usize, usize)) -> Result<ImageTensor> {
    if target.0 == 0 || target.1 == 0 {
        return Err(Error::Preprocess(format!(
            "resize target must be positive, got {}x{}",
            target.0, target.1
        )));
    }
    if img.dims() == target {
        return Ok(img.clone());
    }
    let (th, tw) = target;
    let mut out = Array3::zeros((th, tw, 3));
    for c in 0..3 {
        let plane = img.data.index_axis(ndarray::Axis(2), c).to_owned();
        let resized = resize_plane(&plane, target);
        out.index_axis_mut(ndarray::Axis(2), c).assign(&resized);
    }
    ImageTensor::new(out, img.range)
}

/// Divide a byte-range image by 255. Re-normalizing a unit-range image is an
/// error.
pub fn normalize(img: &ImageTensor) -> Result<ImageTensor> {
    if img.range != ValueRange::Byte {
        return Err(Error::Preprocess(
            "normalize expects a byte-range image; input is already unit-range".into(),
        ));
    }
    ImageTensor::new(img.data.mapv(|v| v / 255.0), ValueRange::Unit)
}

/// Augmentation switches and magnitudes. A policy with all flags off is the
/// identity transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub rotate: bool,
    pub hflip: bool,
    pub crop: bool,
    pub brightness: bool,
    pub contrast: bool,
    pub rotation_max_deg: f64,
    pub hflip_prob: f64,
    pub crop_fraction: f64,
    pub brightness_delta_max: f64,
    pub contrast_range: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            rotate: true,
            hflip: true,
            crop: true,
            brightness: true,
            contrast: true,
            rotation_max_deg: defaults::ROTATION_MAX_DEG,
            hflip_prob: defaults::HFLIP_PROB,
            crop_fraction: defaults::CROP_FRACTION,
            brightness_delta_max: defaults::BRIGHTNESS_DELTA_MAX,
            contrast_range: defaults::CONTRAST_RANGE,
            seed: defaults::SEED,
        }
    }
}

impl AugmentationPolicy {
    /// Identity policy: every transform disabled.
    pub fn off() -> Self {
        AugmentationPolicy {
            rotate: false,
            hflip: false,
            crop: false,
            brightness: false,
            contrast: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.rotation_max_deg < 0.0 {
            problems.push("rotation_max_deg must be >= 0".to_string());
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            problems.push("hflip_prob must be in [0, 1]".to_string());
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            problems.push("crop_fraction must be in (0, 1]".to_string());
        }
        if self.brightness_delta_max < 0.0 {
            problems.push("brightness_delta_max must be >= 0".to_string());
        }
        if self.contrast_range.0 < 0.0 || self.contrast_range.1 < self.contrast_range.0 {
            problems.push("contrast_range must satisfy 0 <= low <= high".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Preprocess(problems.join("; ")))
        }
    }
}

/// All random decisions for augmenting one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    pub rotation_deg: f64,
    pub do_hflip: bool,
    /// Crop window offset as fractions of the slack in each axis.
    pub crop_offset: (f64, f64),
    pub brightness_delta: f64,
    pub contrast_scale: f64,
}

impl AugmentDraw {
    /// Identity draw: applying it with any all-off policy leaves the image
    /// unchanged.
    pub fn identity() -> Self {
        AugmentDraw {
            rotation_deg: 0.0,
            do_hflip: false,
            crop_offset: (0.5, 0.5),
            brightness_delta: 0.0,
            contrast_scale: 1.0,
        }
    }

    /// Sample a draw for `sample_index`, fully determined by
    /// `(policy.seed, sample_index)`. Disabled transforms consume no
    /// randomness.
    pub fn sample(policy: &AugmentationPolicy, sample_index: u64) -> Self {
        let seed = crate::config::derive_seed(policy.seed, "augment-draw", sample_index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = AugmentDraw::identity();
        if policy.rotate && policy.rotation_max_deg > 0.0 {
            draw.rotation_deg =
                rng.random_range(-policy.rotation_max_deg..=policy.rotation_max_deg);
        }
        if policy.hflip {
            draw.do_hflip = rng.random_bool(policy.hflip_prob);
        }
        if policy.crop && policy.crop_fraction < 1.0 {
            draw.crop_offset = (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0));
        }
        if policy.brightness && policy.brightness_delta_max > 0.0 {
            draw.brightness_delta =
                rng.random_range(-policy.brightness_delta_max..=policy.brightness_delta_max);
        }
        if policy.contrast {
            let (lo, hi) = policy.contrast_range;
            draw.contrast_scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        }
        draw
    }
}

fn rotate_reflect(data: &Array3<f64>, degrees: f64) -> Array3<f64> {
    let (h, w, _) = data.dim();
    let theta = degrees.to_radians();
    let (sin, cos) = (theta.sin(), theta.cos());
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            // Inverse rotation about the image center.
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let src_y = cy + dy * cos - dx * sin;
            let src_x = cx + dy * sin + dx * cos;
            let y0 = src_y.floor() as i64;
            let x0 = src_x.floor() as i64;
            let ty = src_y - y0 as f64;
            let tx = src_x - x0 as f64;
            let yi0 = reflect_index(y0, h);
            let yi1 = reflect_index(y0 + 1, h);
            let xi0 = reflect_index(x0, w);
            let xi1 = reflect_index(x0 + 1, w);
            for c in 0..3 {
                out[[y, x, c]] = (1.0 - ty)
                    * ((1.0 - tx) * data[[yi0, xi0, c]] + tx * data[[yi0, xi1, c]])
                    + ty * ((1.0 - tx) * data[[yi1, xi0, c]] + tx * data[[yi1, xi1, c]]);
            }
        }
    }
    out
}

fn hflip(data: &Array3<f64>) -> Array3<f64> {
    let (h, w, _) = data.dim();
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| data[[y, w - 1 - x, c]])
}

/// Apply the augmentation chain. The input must be unit-range; the output is
/// clamped to [0, 1] and keeps the input dimensions.
pub fn augment(img: &ImageTensor, policy: &AugmentationPolicy, draw: &AugmentDraw) -> Result<ImageTensor> {
    if img.range != ValueRange::Unit {
        return Err(Error::Preprocess("augment expects a unit-range image".into()));
    }
    policy.validate()?;
    let (h, w) = img.dims();
    let mut data = img.data.clone();

    if policy.rotate && draw.rotation_deg != 0.0 {
        data = rotate_reflect(&data, draw.rotation_deg);
    }
    if policy.hflip && draw.do_hflip {
        data = hflip(&data);
    }
    if policy.crop && policy.crop_fraction < 1.0 {
        let ch = ((h as f64 * policy.crop_fraction).round() as usize).max(1);
        let cw = ((w as f64 * policy.crop_fraction).round() as usize).max(1);
        let oy = ((h - ch) as f64 * draw.crop_offset.0).round() as usize;
        let ox = ((w - cw) as f64 * draw.crop_offset.1).round() as usize;
        let window = data.slice(ndarray::s![oy..oy + ch, ox..ox + cw, ..]).to_owned();
        let cropped = ImageTensor::new(window, ValueRange::Unit)?;
        data = resize(&cropped, (h, w))?.data;
    }
    if policy.brightness && draw.brightness_delta != 0.0 {
        data.mapv_inplace(|v| v + draw.brightness_delta);
    }
    if policy.contrast && draw.contrast_scale != 1.0 {
        let mean = data.mean().unwrap_or(0.0);
        let c = draw.contrast_scale;
        data.mapv_inplace(|v| mean + c * (v - mean));
    }
    data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    ImageTensor::new(data, ValueRange::Unit)
}

/// Per-split transform pipeline: resize + normalize always, augmentation only
/// when constructed for the train split.
#[derive(Debug, Clone)]
pub struct TransformPipeline {
    pub target: (usize, usize),
    pub policy: AugmentationPolicy,
    pub augment_enabled: bool,
}

impl TransformPipeline {
    pub fn for_split(split: crate::dataset::Split, target: (usize, usize), policy: AugmentationPolicy) -> Self {
        let augment_enabled = split == crate::dataset::Split::Train;
        TransformPipeline { target, policy, augment_enabled }
    }

    /// Resize + normalize; byte-range input expected.
    pub fn prepare(&self, img: &ImageTensor) -> Result<ImageTensor> {
        normalize(&resize(img, self.target)?)
    }

    /// Full transform for one sample. `sample_index` keys the augmentation
    /// draw; it is ignored when augmentation is disabled.
    pub fn apply(&self, img: &ImageTensor, sample_index: u64) -> Result<ImageTensor> {
        let prepared = self.prepare(img)?;
        if !self.augment_enabled {
            return Ok(prepared);
        }
        let draw = AugmentDraw::sample(&self.policy, sample_index);
        augment(&prepared, &self.policy, &draw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn constant_img(h: usize, w: usize, v: f64, range: ValueRange) -> ImageTensor {
        ImageTensor::new(Array3::from_elem((h, w, 3), v), range).unwrap()
    }

    #[test]
    fn resize_identity_is_bitwise() {
        let img = constant_img(7, 5, 0.25, ValueRange::Unit);
        let out = resize(&img, (7, 5)).unwrap();
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn resize_to_standard_dims() {
        let img = constant_img(768, 768, 40.0, ValueRange::Byte);
        let out = resize(&img, (299, 299)).unwrap();
        assert_eq!(out.dims(), (299, 299));
        assert_eq!(out.range, ValueRange::Byte);
    }

    #[test]
    fn resize_checkerboard_matches_hand_bilinear() {
        // 2x2 checkerboard upsampled to 4x4; the four center values were
        // computed by hand from the half-pixel-center bilinear weights.
        let plane = array![[1.0, 0.0], [0.0, 1.0]];
        let out = resize_plane(&plane, (4, 4));
        assert!((out[[1, 1]] - 0.625).abs() < 1e-12);
        assert!((out[[1, 2]] - 0.375).abs() < 1e-12);
        assert!((out[[2, 1]] - 0.375).abs() < 1e-12);
        assert!((out[[2, 2]] - 0.625).abs() < 1e-12);
    }

    #[test]
    fn resize_rejects_zero_target() {
        let img = constant_img(4, 4, 0.0, ValueRange::Unit);
        assert!(resize(&img, (0, 4)).is_err());
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let all255 = normalize(&constant_img(2, 2, 255.0, ValueRange::Byte)).unwrap();
        assert!(all255.data.iter().all(|&v| v == 1.0));
        let all0 = normalize(&constant_img(2, 2, 0.0, ValueRange::Byte)).unwrap();
        assert!(all0.data.iter().all(|&v| v == 0.0));
        let mid = normalize(&constant_img(1, 1, 128.0, ValueRange::Byte)).unwrap();
        assert!((mid.data[[0, 0, 0]] - 128.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_guards_double_application() {
        let unit = constant_img(2, 2, 0.5, ValueRange::Unit);
        assert!(normalize(&unit).is_err());
    }

    #[test]
    fn all_off_policy_is_identity() {
        let img = random_img(13, 9, 7);
        let out = augment(&img, &AugmentationPolicy::off(), &AugmentDraw::sample(&AugmentationPolicy::off(), 3)).unwrap();
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn forced_hflip_is_an_involution() {
        let img = random_img(8, 11, 1);
        let mut policy = AugmentationPolicy::off();
        policy.hflip = true;
        policy.hflip_prob = 1.0;
        let mut draw = AugmentDraw::identity();
        draw.do_hflip = true;
        let once = augment(&img, &policy, &draw).unwrap();
        let twice = augment(&once, &policy, &draw).unwrap();
        assert_eq!(twice.data, img.data);
    }

    #[test]
    fn brightness_shift_is_analytic() {
        let img = constant_img(4, 4, 0.5, ValueRange::Unit);
        let mut policy = AugmentationPolicy::off();
        policy.brightness = true;
        policy.brightness_delta_max = 0.2;
        let mut draw = AugmentDraw::identity();
        draw.brightness_delta = 0.1;
        let out = augment(&img, &policy, &draw).unwrap();
        assert!(out.data.iter().all(|&v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn contrast_preserves_mean_without_brightness() {
        let img = random_img_in(9, 9, 5, 0.3, 0.7);
        let mut policy = AugmentationPolicy::off();
        policy.contrast = true;
        policy.contrast_range = (0.8, 1.2);
        let mut draw = AugmentDraw::identity();
        draw.contrast_scale = 1.17;
        let before = img.data.mean().unwrap();
        let out = augment(&img, &policy, &draw).unwrap();
        let after = out.data.mean().unwrap();
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn output_stays_clamped_for_arbitrary_policies() {
        for seed in 0..40u64 {
            let img = random_img(12, 12, seed);
            let mut policy = AugmentationPolicy::default();
            policy.seed = seed;
            policy.brightness_delta_max = 0.8;
            policy.contrast_range = (0.1, 3.0);
            let out = augment(&img, &policy, &AugmentDraw::sample(&policy, seed)).unwrap();
            assert!(out.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert_eq!(out.dims(), img.dims());
        }
    }

    #[test]
    fn same_policy_and_index_give_identical_output() {
        let img = random_img(16, 16, 2);
        let policy = AugmentationPolicy::default();
        let a = augment(&img, &policy, &AugmentDraw::sample(&policy, 41)).unwrap();
        let b = augment(&img, &policy, &AugmentDraw::sample(&policy, 41)).unwrap();
        let c = augment(&img, &policy, &AugmentDraw::sample(&policy, 42)).unwrap();
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn pipeline_disables_augmentation_off_train() {
        let policy = AugmentationPolicy::default();
        for split in [crate::dataset::Split::Val, crate::dataset::Split::Test] {
            let p = TransformPipeline::for_split(split, (8, 8), policy.clone());
            assert!(!p.augment_enabled);
        }
        let p = TransformPipeline::for_split(crate::dataset::Split::Train, (8, 8), policy);
        assert!(p.augment_enabled);
    }

    fn random_img(h: usize, w: usize, seed: u64) -> ImageTensor {
        random_img_in(h, w, seed, 0.0, 1.0)
    }

    fn random_img_in(h: usize, w: usize, seed: u64, lo: f64, hi: f64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((h, w, 3), |_| rng.random_range(lo..hi));
        ImageTensor::new(data, ValueRange::Unit).unwrap()
    }
}
