//! Two-view stochastic augmentation.
//!
//! Order per view: random resized crop, color jitter, grayscale, Gaussian
//! blur, horizontal flip. Inputs and outputs are square `side×side×3`
//! rasters in `[0, 1]`.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::image::crop_resize;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct AugmentPolicy {
    /// Crop area as a fraction of the image, `(min, max)`.
    pub crop_scale: (f64, f64),
    /// Crop aspect ratio range.
    pub crop_ratio: (f64, f64),
    pub flip_prob: f64,
    /// Probability that color jitter is applied at all.
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    /// Blur standard deviation range in pixels.
    pub blur_sigma: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
        }
    }
}

impl AugmentPolicy {
    /// Every transform disabled: views equal the input.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_prob: 0.0,
            jitter_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma: (0.1, 2.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.flip_prob, self.jitter_prob, self.grayscale_prob, self.blur_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config("crop scale range must lie within (0, 1]".into()));
        }
        if !(self.crop_ratio.0 > 0.0 && self.crop_ratio.0 <= self.crop_ratio.1) {
            return Err(Error::Config("crop ratio range must be positive and ordered".into()));
        }
        if [self.brightness, self.contrast, self.saturation].iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Config("jitter strengths must lie in [0, 1]".into()));
        }
        if !(self.blur_sigma.0 > 0.0 && self.blur_sigma.0 <= self.blur_sigma.1) {
            return Err(Error::Config("blur sigma range must be positive and ordered".into()));
        }
        Ok(())
    }
}

/// Two independent draws of the augmentation pipeline.
pub fn two_views<R: Rng + ?Sized>(
    image: &[f32],
    side: usize,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> (Vec<f32>, Vec<f32>) {
    let a = augment(image, side, policy, rng);
    let b = augment(image, side, policy, rng);
    (a, b)
}

pub fn augment<R: Rng + ?Sized>(image: &[f32], side: usize, policy: &AugmentPolicy, rng: &mut R) -> Vec<f32> {
    assert_eq!(image.len(), side * side * 3, "expected a square RGB raster");
    let rect = sample_crop(side, policy, rng);
    let mut img = crop_resize(image, side, side, 3, rect, side, side);

    if policy.jitter_prob > 0.0 && rng.random_bool(policy.jitter_prob) {
        let mut order = [0u8, 1, 2];
        order.shuffle(rng);
        for op in order {
            match op {
                0 if policy.brightness > 0.0 => {
                    let f = factor(policy.brightness, rng);
                    img.iter_mut().for_each(|v| *v *= f);
                }
                1 if policy.contrast > 0.0 => {
                    let f = factor(policy.contrast, rng);
                    let mean = img.chunks(3).map(luma).sum::<f32>() / (side * side) as f32;
                    img.iter_mut().for_each(|v| *v = (*v - mean) * f + mean);
                }
                2 if policy.saturation > 0.0 => {
                    let f = factor(policy.saturation, rng);
                    for px in img.chunks_mut(3) {
                        let g = luma(px);
                        px.iter_mut().for_each(|v| *v = (*v - g) * f + g);
                    }
                }
                _ => {}
            }
            img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
    }
    if policy.grayscale_prob > 0.0 && rng.random_bool(policy.grayscale_prob) {
        for px in img.chunks_mut(3) {
            let g = luma(px);
            px.iter_mut().for_each(|v| *v = g);
        }
    }
    if policy.blur_prob > 0.0 && rng.random_bool(policy.blur_prob) {
        let sigma = rng.random_range(policy.blur_sigma.0..=policy.blur_sigma.1);
        img = gaussian_blur(&img, side, sigma as f32);
    }
    if policy.flip_prob > 0.0 && rng.random_bool(policy.flip_prob) {
        flip_horizontal(&mut img, side);
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

fn factor<R: Rng + ?Sized>(strength: f64, rng: &mut R) -> f32 {
    rng.random_range((1.0 - strength).max(0.0)..=1.0 + strength) as f32
}

fn luma(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

/// `(x0, y0, w, h)` in pixels. Falls back to the whole image when no crop
/// with the sampled area and ratio fits.
fn sample_crop<R: Rng + ?Sized>(side: usize, policy: &AugmentPolicy, rng: &mut R) -> (f32, f32, f32, f32) {
    let full = (0.0, 0.0, side as f32, side as f32);
    let (lo, hi) = policy.crop_scale;
    if lo >= 1.0 {
        return full;
    }
    let area = (side * side) as f64;
    let (rlo, rhi) = (libm::log(policy.crop_ratio.0), libm::log(policy.crop_ratio.1));
    for _ in 0..10 {
        let target = area * rng.random_range(lo..=hi);
        let ratio = libm::exp(if rlo < rhi { rng.random_range(rlo..rhi) } else { rlo });
        let w = libm::round(libm::sqrt(target * ratio)) as usize;
        let h = libm::round(libm::sqrt(target / ratio)) as usize;
        if w > 0 && h > 0 && w <= side && h <= side {
            let x0 = rng.random_range(0..=side - w);
            let y0 = rng.random_range(0..=side - h);
            return (x0 as f32, y0 as f32, w as f32, h as f32);
        }
    }
    full
}

fn flip_horizontal(img: &mut [f32], side: usize) {
    for row in img.chunks_mut(side * 3) {
        for x in 0..side / 2 {
            for c in 0..3 {
                row.swap(x * 3 + c, (side - 1 - x) * 3 + c);
            }
        }
    }
}

/// Separable Gaussian blur with a kernel radius of about a tenth of the side.
fn gaussian_blur(img: &[f32], side: usize, sigma: f32) -> Vec<f32> {
    let radius = (side / 20).max(1);
    let mut kernel: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let d = i as f32 - radius as f32;
            libm::expf(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let sum: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);

    let clamp = |i: isize| i.clamp(0, side as isize - 1) as usize;
    let mut tmp = vec![0.0f32; img.len()];
    for y in 0..side {
        for x in 0..side {
            for c in 0..3 {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let xx = clamp(x as isize + j as isize - radius as isize);
                    acc += k * img[(y * side + xx) * 3 + c];
                }
                tmp[(y * side + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0.0f32; img.len()];
    for y in 0..side {
        for x in 0..side {
            for c in 0..3 {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let yy = clamp(y as isize + j as isize - radius as isize);
                    acc += k * tmp[(yy * side + x) * 3 + c];
                }
                out[(y * side + x) * 3 + c] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn ramp(side: usize) -> Vec<f32> {
        (0..side * side * 3).map(|i| (i % 97) as f32 / 96.0).collect()
    }

    #[test]
    fn identity_policy_returns_input() {
        let img = ramp(16);
        let (a, b) = two_views(&img, 16, &AugmentPolicy::identity(), &mut rng::seeded(1));
        assert_eq!(a, img);
        assert_eq!(b, img);
    }

    #[test]
    fn certain_flip_mirrors_both_views() {
        let img = ramp(8);
        let policy = AugmentPolicy { flip_prob: 1.0, ..AugmentPolicy::identity() };
        let (a, b) = two_views(&img, 8, &policy, &mut rng::seeded(2));
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    assert_eq!(a[(y * 8 + x) * 3 + c], img[(y * 8 + 7 - x) * 3 + c]);
                }
            }
        }
        assert_eq!(a, b);
    }

    #[test]
    fn seeded_views_reproduce() {
        let img = ramp(16);
        let p = AugmentPolicy::default();
        let first = two_views(&img, 16, &p, &mut rng::seeded(5));
        let second = two_views(&img, 16, &p, &mut rng::seeded(5));
        assert_eq!(first, second);
    }

    #[test]
    fn default_policy_validates() {
        assert!(AugmentPolicy::default().validate().is_ok());
        let bad = AugmentPolicy { flip_prob: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = AugmentPolicy { crop_scale: (0.0, 1.0), ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
