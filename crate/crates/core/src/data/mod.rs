//! Data ingestion and the stochastic view pipeline: CIFAR-10 binary reading,
//! the augmentation module producing M correlated views per sample, synthetic
//! fixtures, and minibatch assembly with in-batch negative indexing.
//!
//! Labels exist only inside the CIFAR reader, where they may balance the
//! subset; nothing past subset selection carries a label.

mod augment;
mod cifar;
mod synthetic;
pub mod tensor_io;

pub use augment::{augment, AugmentPolicy};
pub use cifar::{load_cifar10_subset, scan_labels, select_subset_ids, CifarSubset};
pub use synthetic::SyntheticSpec;

use crate::error::{Error, Result};
use ndarray::Array3;
use rand::Rng;

/// An RGB image with values in [0, 1], stored channel-major as [3, H, W].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array3<f64>,
}

impl Image {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        let (c, h, w) = pixels.dim();
        if c != 3 {
            return Err(Error::format("image", format!("expected 3 channels, got {c}")));
        }
        if h < 8 || w < 8 {
            return Err(Error::format(
                "image",
                format!("spatial dims {h}x{w} below the 8x8 minimum"),
            ));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::format("image", "pixel values outside [0, 1]"));
        }
        Ok(Image { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    /// Deterministic center crop, used to fit originals to the view resolution.
    pub fn center_crop(&self, size: usize) -> Result<Image> {
        let (_, h, w) = self.pixels.dim();
        if size > h.min(w) {
            return Err(Error::config(
                "crop",
                format!("crop {size} exceeds image {h}x{w}"),
            ));
        }
        let y0 = (h - size) / 2;
        let x0 = (w - size) / 2;
        let pixels = self
            .pixels
            .slice(ndarray::s![.., y0..y0 + size, x0..x0 + size])
            .to_owned();
        Image::new(pixels)
    }
}

/// One sample with its M stochastic views.
#[derive(Debug, Clone)]
pub struct ViewSet {
    pub sample_id: u64,
    pub original: Image,
    pub views: Vec<Image>,
}

/// K view-sets plus the derived negative index: the negatives of anchor i are
/// the views of every other anchor, M(K-1) of them.
#[derive(Debug, Clone)]
pub struct Minibatch {
    view_sets: Vec<ViewSet>,
    m: usize,
}

impl Minibatch {
    pub fn k(&self) -> usize {
        self.view_sets.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn view_sets(&self) -> &[ViewSet] {
        &self.view_sets
    }

    /// Negative view references for one anchor as (anchor slot, view index)
    /// pairs, ordered by anchor then view.
    pub fn negatives_of(&self, anchor: usize) -> Vec<(usize, usize)> {
        let mut negatives = Vec::with_capacity(self.m * (self.k() - 1));
        for j in 0..self.view_sets.len() {
            if j != anchor {
                for v in 0..self.m {
                    negatives.push((j, v));
                }
            }
        }
        negatives
    }
}

/// Sample K distinct images, augment M views of each, and index the in-batch
/// negatives. Originals are center-cropped to the view resolution when they
/// are larger than the crop size.
pub fn make_minibatch<R: Rng>(
    data: &[Image],
    k: usize,
    m: usize,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<Minibatch> {
    if k < 2 {
        return Err(Error::config("batch_size", "minibatch needs K >= 2"));
    }
    if m == 0 {
        return Err(Error::config("views", "need at least one view per sample"));
    }
    if k > data.len() {
        return Err(Error::config(
            "batch_size",
            format!("K = {k} exceeds dataset size {}", data.len()),
        ));
    }
    let chosen = rand::seq::index::sample(rng, data.len(), k);
    let mut view_sets = Vec::with_capacity(k);
    for idx in chosen.iter() {
        let image = &data[idx];
        let original = if image.height() == policy.crop && image.width() == policy.crop {
            image.clone()
        } else {
            image.center_crop(policy.crop)?
        };
        let views = (0..m)
            .map(|_| augment(image, policy, rng))
            .collect::<Result<Vec<_>>>()?;
        view_sets.push(ViewSet {
            sample_id: idx as u64,
            original,
            views,
        });
    }
    Ok(Minibatch { view_sets, m })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, STREAM_BATCH_BASE};

    fn dataset(n: usize, size: usize) -> Vec<Image> {
        SyntheticSpec {
            count: n,
            size,
            classes: 4,
            seed: 11,
        }
        .generate()
        .unwrap()
    }

    #[test]
    fn negative_count_is_m_times_k_minus_one() {
        let data = dataset(8, 8);
        let policy = AugmentPolicy::for_size(8);
        let mut rng = stream_rng(0, STREAM_BATCH_BASE);
        let mb = make_minibatch(&data, 2, 1, &policy, &mut rng).unwrap();
        assert_eq!(mb.negatives_of(0).len(), 1);
        let mb = make_minibatch(&data, 5, 3, &policy, &mut rng).unwrap();
        for anchor in 0..5 {
            assert_eq!(mb.negatives_of(anchor).len(), 3 * 4);
        }
    }

    #[test]
    fn negatives_exclude_own_views_exhaustively() {
        let data = dataset(6, 8);
        let policy = AugmentPolicy::for_size(8);
        for k in 2..=5usize {
            for m in 1..=3usize {
                let mut rng = stream_rng(k as u64 * 10 + m as u64, STREAM_BATCH_BASE);
                let mb = make_minibatch(&data, k, m, &policy, &mut rng).unwrap();
                for anchor in 0..k {
                    let negatives = mb.negatives_of(anchor);
                    assert_eq!(negatives.len(), m * (k - 1));
                    let mut seen = std::collections::HashSet::new();
                    for (slot, view) in negatives {
                        assert_ne!(slot, anchor, "anchor {anchor} sees its own view");
                        assert!(view < m);
                        assert!(seen.insert((slot, view)), "duplicate negative");
                    }
                }
            }
        }
    }

    #[test]
    fn oversized_k_is_rejected() {
        let data = dataset(3, 8);
        let policy = AugmentPolicy::for_size(8);
        let mut rng = stream_rng(0, STREAM_BATCH_BASE);
        assert!(make_minibatch(&data, 4, 2, &policy, &mut rng).is_err());
    }

    #[test]
    fn batches_are_deterministic_given_rng_state() {
        let data = dataset(10, 8);
        let policy = AugmentPolicy::for_size(8);
        let run = |seed: u64| {
            let mut rng = stream_rng(seed, STREAM_BATCH_BASE);
            let mb = make_minibatch(&data, 4, 2, &policy, &mut rng).unwrap();
            mb.view_sets()
                .iter()
                .map(|vs| {
                    (
                        vs.sample_id,
                        vs.views[0].pixels().iter().sum::<f64>(),
                        vs.views[1].pixels().iter().sum::<f64>(),
                    )
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn minibatch_carries_no_labels() {
        // Exhaustive destructuring: adding a label field anywhere in the
        // batch types is a compile error here.
        let data = dataset(4, 8);
        let policy = AugmentPolicy::for_size(8);
        let mut rng = stream_rng(1, STREAM_BATCH_BASE);
        let mb = make_minibatch(&data, 2, 1, &policy, &mut rng).unwrap();
        let Minibatch { view_sets, m: _ } = mb;
        for ViewSet {
            sample_id: _,
            original: _,
            views: _,
        } in view_sets
        {}
    }
}
