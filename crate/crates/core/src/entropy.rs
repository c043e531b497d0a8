//! Patch-level Shannon entropy over the vision-token grid.
//!
//! Each patch of `patch_h x patch_w` pixels maps to one vision token. Its
//! complexity score is the entropy (in nats) of the patch intensity histogram,
//! and the image-level complexity is the median over all patches.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::{save_gray16, ImageBuffer};

pub const DEFAULT_BINS: usize = 256;

/// How patches that overhang the right/bottom border are completed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PadPolicy {
    /// Repeat the last row/column.
    #[default]
    EdgeReplicate,
    /// Require dimensions divisible by the patch size.
    Reject,
}

/// Patch grid laid over an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub patch_h: usize,
    pub patch_w: usize,
    pub rows: usize,
    pub cols: usize,
    #[serde(default)]
    pub pad_policy: PadPolicy,
}

impl PatchGeometry {
    pub fn for_image(
        width: usize,
        height: usize,
        patch_h: usize,
        patch_w: usize,
        pad_policy: PadPolicy,
    ) -> Result<Self> {
        if patch_h == 0 || patch_w == 0 {
            return Err(invalid("patch size must be >= 1"));
        }
        if width == 0 || height == 0 {
            return Err(invalid("image dimensions must be >= 1"));
        }
        if pad_policy == PadPolicy::Reject && (width % patch_w != 0 || height % patch_h != 0) {
            return Err(invalid(format!(
                "{width}x{height} image is not divisible into {patch_h}x{patch_w} patches"
            )));
        }
        Ok(Self {
            patch_h,
            patch_w,
            rows: height.div_ceil(patch_h),
            cols: width.div_ceil(patch_w),
            pad_policy,
        })
    }

    /// Number of vision tokens `M`.
    pub fn token_count(&self) -> usize {
        self.rows * self.cols
    }

    /// `(row, col)` of a raster patch index.
    pub fn position(&self, index: usize) -> (usize, usize) {
        (index / self.cols, index % self.cols)
    }
}

/// Per-patch entropies in raster order plus the global (median) complexity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyMap {
    pub values: Vec<f64>,
    pub geometry: PatchGeometry,
    pub bins: usize,
    pub global: f64,
}

impl EntropyMap {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| crate::Error::json("entropy map", e))
    }

    /// Patch-grid heatmap, linearly mapping `[0, ln bins]` onto `[0, 65535]`.
    pub fn heatmap_samples(&self) -> Vec<u16> {
        let max = (self.bins as f64).ln();
        self.values
            .iter()
            .map(|&h| ((h / max).clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect()
    }

    pub fn save_heatmap(&self, path: &Path) -> Result<()> {
        save_gray16(path, self.geometry.cols, self.geometry.rows, self.heatmap_samples())
    }
}

fn check_bins(bins: usize) -> Result<()> {
    if !(2..=256).contains(&bins) {
        return Err(invalid(format!("bins must be in [2, 256], got {bins}")));
    }
    Ok(())
}

/// Shannon entropy (nats) of the histogram of `pixels` with `bins` equal-width bins.
pub fn patch_entropy(pixels: &[u8], bins: usize) -> Result<f64> {
    check_bins(bins)?;
    if pixels.is_empty() {
        return Err(invalid("empty patch"));
    }
    let mut counts = [0u32; 256];
    for &v in pixels {
        counts[v as usize * bins / 256] += 1;
    }
    Ok(entropy_from_counts(&counts[..bins], pixels.len()))
}

fn entropy_from_counts(counts: &[u32], total: usize) -> f64 {
    let n = total as f64;
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * p.ln();
        }
    }
    // -0.0 for single-outcome patches
    h.max(0.0)
}

/// Computes the entropy of every patch in raster order.
///
/// Border patches are completed by edge replication under [`PadPolicy::EdgeReplicate`].
pub fn compute_entropy_map(gray: &ImageBuffer, geometry: PatchGeometry, bins: usize) -> Result<EntropyMap> {
    check_bins(bins)?;
    if gray.channels() != 1 {
        return Err(invalid("entropy map requires a single-channel image"));
    }
    let expected = PatchGeometry::for_image(
        gray.width(),
        gray.height(),
        geometry.patch_h,
        geometry.patch_w,
        geometry.pad_policy,
    )?;
    if expected != geometry {
        return Err(invalid(format!(
            "geometry {}x{} grid does not match a {}x{} image",
            geometry.rows,
            geometry.cols,
            gray.width(),
            gray.height()
        )));
    }

    let values: Vec<f64> = (0..geometry.token_count())
        .into_par_iter()
        .map(|index| {
            let (row, col) = geometry.position(index);
            let mut counts = [0u32; 256];
            for dy in 0..geometry.patch_h {
                let y = (row * geometry.patch_h + dy).min(gray.height() - 1);
                for dx in 0..geometry.patch_w {
                    let x = (col * geometry.patch_w + dx).min(gray.width() - 1);
                    counts[gray.luma_at(x, y) as usize * bins / 256] += 1;
                }
            }
            entropy_from_counts(&counts[..bins], geometry.patch_h * geometry.patch_w)
        })
        .collect();

    let global = global_entropy(&values)?;
    Ok(EntropyMap {
        values,
        geometry,
        bins,
        global,
    })
}

/// Median of the patch entropies; the mean of the two central values for even counts.
pub fn global_entropy(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(invalid("median of an empty entropy map"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Ok(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    })
}
