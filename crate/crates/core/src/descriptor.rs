//! Built-in dense patch descriptor (`F_0`) and the average-pooling pyramid.
//!
//! Each pixel is described by its grayscale `(2r+1)^2` neighbourhood with
//! border replication, mean-subtracted and L2-normalized. The result is
//! invariant to affine intensity changes and exactly zero on flat patches.
//! Coarser levels are produced by repeated 2x2 mean pooling followed by
//! renormalization, which gives a backbone-free pyramid.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{FeatureMap, FeaturePyramid, Image, ZERO_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DescriptorConfig {
    /// Patch half-size; patches are `(2r+1) x (2r+1)`.
    pub patch_radius: usize,
    /// Pyramid depth `k`; the pyramid has `k + 1` levels.
    pub pyramid_depth: usize,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        Self {
            patch_radius: 2,
            pyramid_depth: 4,
        }
    }
}

impl DescriptorConfig {
    pub fn channels_out(&self) -> usize {
        let side = 2 * self.patch_radius + 1;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_radius < 1 {
            return Err(Error::InvalidConfig("patch_radius must be >= 1".into()));
        }
        if self.pyramid_depth < 1 {
            return Err(Error::InvalidConfig("pyramid_depth must be >= 1".into()));
        }
        Ok(())
    }
}

/// Computes the full-resolution descriptor map of `img`.
pub fn dense_patch_descriptor(img: &Image, cfg: &DescriptorConfig) -> Result<FeatureMap> {
    cfg.validate()?;
    let side = 2 * cfg.patch_radius + 1;
    let (h, w) = (img.height(), img.width());
    if h < side || w < side {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            min: side,
        });
    }
    let gray = img.to_gray();
    let pix = gray.data();
    let channels = side * side;
    let radius = cfg.patch_radius as isize;

    let mut data = vec![0.0f32; h * w * channels];
    data.par_chunks_mut(w * channels)
        .enumerate()
        .for_each(|(row, out_row)| {
            let mut patch = vec![0.0f64; channels];
            for col in 0..w {
                let mut k = 0;
                for dr in -radius..=radius {
                    let r = (row as isize + dr).clamp(0, h as isize - 1) as usize;
                    for dc in -radius..=radius {
                        let c = (col as isize + dc).clamp(0, w as isize - 1) as usize;
                        patch[k] = pix[r * w + c] as f64;
                        k += 1;
                    }
                }
                let mean = patch.iter().sum::<f64>() / channels as f64;
                patch.iter_mut().for_each(|v| *v -= mean);
                let norm = patch.iter().map(|v| v * v).sum::<f64>().sqrt();
                let dst = &mut out_row[col * channels..(col + 1) * channels];
                if norm >= ZERO_NORM_EPS {
                    for (d, v) in dst.iter_mut().zip(&patch) {
                        *d = (v / norm) as f32;
                    }
                }
            }
        });
    FeatureMap::new(h, w, channels, data)
}

/// Builds `[F_0, ..., F_k]` where each level is the renormalized 2x2 average
/// of the one below. The deepest level must be at least 2x2.
pub fn build_pyramid_average_pooling(f0: FeatureMap, depth: usize) -> Result<FeaturePyramid> {
    if depth < 1 {
        return Err(Error::InvalidConfig("pyramid depth must be >= 1".into()));
    }
    let source_size = (f0.height(), f0.width());
    let mut levels = Vec::with_capacity(depth + 1);
    levels.push(f0);
    for l in 1..=depth {
        let next = levels[l - 1].average_pool2x().l2_normalize_channels();
        if next.height() < 2 || next.width() < 2 {
            return Err(Error::PyramidTooDeep {
                level: l,
                height: next.height(),
                width: next.width(),
            });
        }
        levels.push(next);
    }
    FeaturePyramid::new(levels, source_size)
}

/// Descriptor plus pyramid in one call.
pub fn builtin_pyramid(img: &Image, cfg: &DescriptorConfig) -> Result<FeaturePyramid> {
    let f0 = dense_patch_descriptor(img, cfg)?;
    build_pyramid_average_pooling(f0, cfg.pyramid_depth)
}
