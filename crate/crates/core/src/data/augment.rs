//! The stochastic augmentation module: crop, flips, grayscale distortion.

use super::Image;
use crate::error::{Error, Result};
use ndarray::Array3;
use rand::Rng;

/// Augmentation parameters. Applied in order: reflect-pad + crop, horizontal
/// flip, vertical flip, grayscale conversion.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    /// Reflect padding (without edge repeat) applied before cropping.
    pub pad: usize,
    /// Output crop size (square).
    pub crop: usize,
    /// Center the crop instead of sampling an offset.
    pub center: bool,
    pub p_hflip: f64,
    pub p_vflip: f64,
    pub p_gray: f64,
}

impl AugmentPolicy {
    /// CIFAR-scale defaults: 4-pixel reflect pad, random 32x32 crop,
    /// both flips at 0.5, grayscale at 0.2.
    pub fn cifar_default() -> Self {
        AugmentPolicy {
            pad: 4,
            crop: 32,
            center: false,
            p_hflip: 0.5,
            p_vflip: 0.5,
            p_gray: 0.2,
        }
    }

    /// Same transform family scaled to a small square input.
    pub fn for_size(size: usize) -> Self {
        AugmentPolicy {
            pad: (size / 8).max(1),
            crop: size,
            center: false,
            p_hflip: 0.5,
            p_vflip: 0.5,
            p_gray: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, p) in [
            ("p_hflip", self.p_hflip),
            ("p_vflip", self.p_vflip),
            ("p_gray", self.p_gray),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(key, "probability must be in [0, 1]"));
            }
        }
        if self.crop == 0 {
            return Err(Error::config("crop", "crop size must be positive"));
        }
        Ok(())
    }
}

// Mirror an out-of-range coordinate back into [0, n) without repeating the
// border pixel.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

const LUMA_R: f64 = 0.299;
const LUMA_G: f64 = 0.587;
const LUMA_B: f64 = 0.114;

/// Apply the augmentation module to one image. Deterministic given the RNG
/// state; output is always `crop` x `crop` with values in [0, 1].
pub fn augment<R: Rng>(image: &Image, policy: &AugmentPolicy, rng: &mut R) -> Result<Image> {
    policy.validate()?;
    let h = image.height();
    let w = image.width();
    if policy.crop > h.min(w) {
        return Err(Error::config(
            "crop",
            format!("crop {} exceeds image {h}x{w}", policy.crop),
        ));
    }
    if policy.pad >= h.min(w) {
        return Err(Error::config("pad", "padding must be below the image size"));
    }
    let span_y = h + 2 * policy.pad - policy.crop;
    let span_x = w + 2 * policy.pad - policy.crop;
    let (off_y, off_x) = if policy.center {
        (span_y / 2, span_x / 2)
    } else {
        (rng.gen_range(0..=span_y), rng.gen_range(0..=span_x))
    };
    let hflip = rng.gen::<f64>() < policy.p_hflip;
    let vflip = rng.gen::<f64>() < policy.p_vflip;
    let gray = rng.gen::<f64>() < policy.p_gray;

    let src = image.pixels();
    let mut out = Array3::<f64>::zeros((3, policy.crop, policy.crop));
    for y in 0..policy.crop {
        for x in 0..policy.crop {
            let mut oy = y;
            let mut ox = x;
            if vflip {
                oy = policy.crop - 1 - oy;
            }
            if hflip {
                ox = policy.crop - 1 - ox;
            }
            let sy = reflect(oy as isize + off_y as isize - policy.pad as isize, h);
            let sx = reflect(ox as isize + off_x as isize - policy.pad as isize, w);
            for c in 0..3 {
                out[[c, y, x]] = src[[c, sy, sx]];
            }
        }
    }
    if gray {
        for y in 0..policy.crop {
            for x in 0..policy.crop {
                let luma = (LUMA_R * out[[0, y, x]]
                    + LUMA_G * out[[1, y, x]]
                    + LUMA_B * out[[2, y, x]])
                    .clamp(0.0, 1.0);
                for c in 0..3 {
                    out[[c, y, x]] = luma;
                }
            }
        }
    }
    Image::new(out)
}
