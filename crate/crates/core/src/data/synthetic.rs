//! Synthetic image fixtures: Gaussian blobs with a controllable class
//! structure, so every test and demo run works without downloading anything.

use super::Image;
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use ndarray::Array3;
use rand::Rng;

/// Generator parameters. Classes differ by blob color and rest position;
/// individual images jitter around their class prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;

fn class_color(class: usize) -> [f64; 3] {
    let t = (class as f64 * GOLDEN).fract();
    [
        0.35 + 0.6 * t,
        0.35 + 0.6 * ((t + 0.33).fract()),
        0.35 + 0.6 * ((t + 0.67).fract()),
    ]
}

impl SyntheticSpec {
    pub fn generate(&self) -> Result<Vec<Image>> {
        if self.count == 0 {
            return Err(Error::config("count", "need at least one image"));
        }
        if self.size < 8 {
            return Err(Error::config("image_size", "synthetic images need size >= 8"));
        }
        if self.classes == 0 {
            return Err(Error::config("classes", "need at least one class"));
        }
        let s = self.size as f64;
        let mut images = Vec::with_capacity(self.count);
        for index in 0..self.count {
            let class = index % self.classes;
            let mut rng = stream_rng(self.seed, index as u64);
            let color = class_color(class);
            let t = (class as f64 * GOLDEN * GOLDEN).fract();
            let cy = s * (0.3 + 0.4 * t) + rng.gen_range(-s / 8.0..s / 8.0);
            let cx = s * (0.3 + 0.4 * ((t + 0.5).fract())) + rng.gen_range(-s / 8.0..s / 8.0);
            let sigma = s / 6.0 * rng.gen_range(0.8..1.2);
            let amplitude = rng.gen_range(0.6..1.0);
            let mut pixels = Array3::<f64>::zeros((3, self.size, self.size));
            for y in 0..self.size {
                for x in 0..self.size {
                    let dy = y as f64 - cy;
                    let dx = x as f64 - cx;
                    let blob = amplitude * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                    for c in 0..3 {
                        let noise = rng.gen_range(0.0..0.08);
                        pixels[[c, y, x]] = (noise + blob * color[c]).clamp(0.0, 1.0);
                    }
                }
            }
            images.push(Image::new(pixels)?);
        }
        Ok(images)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec {
            count: 6,
            size: 8,
            classes: 3,
            seed: 42,
        };
        let a = spec.generate().unwrap();
        let b = spec.generate().unwrap();
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.pixels(), y.pixels());
        }
    }

    #[test]
    fn values_are_in_unit_interval() {
        let spec = SyntheticSpec {
            count: 10,
            size: 12,
            classes: 4,
            seed: 7,
        };
        for image in spec.generate().unwrap() {
            assert!(image.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn undersized_images_are_rejected() {
        let spec = SyntheticSpec {
            count: 1,
            size: 4,
            classes: 1,
            seed: 0,
        };
        assert!(spec.generate().is_err());
    }
}
