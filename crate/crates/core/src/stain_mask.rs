//! IHC activation masks from HSV thresholding and the dynamic loss weights
//! derived from them.

use serde::{Deserialize, Serialize};

use crate::color::{rgb_to_hsv_unchecked, Hsv};
use crate::error::{Error, Result};
use crate::filter::{box_downsample, box_downsample_adjoint, gaussian_blur, gaussian_blur_adjoint};
use crate::raster::{BitPlane, Raster, LUMA};

/// HSV band that marks activated (antibody-positive) pixels for one stain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StainConfig {
    pub stain_id: usize,
    pub stain_name: String,
    pub hsv_lo: Hsv,
    pub hsv_hi: Hsv,
}

impl StainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hsv_lo.s > self.hsv_hi.s || self.hsv_lo.v > self.hsv_hi.v {
            return Err(Error::Config(format!(
                "stain {}: empty saturation/value band",
                self.stain_name
            )));
        }
        for h in [self.hsv_lo.h, self.hsv_hi.h] {
            if !(0.0..360.0).contains(&h) {
                return Err(Error::Config(format!(
                    "stain {}: hue bound {h} outside [0, 360)",
                    self.stain_name
                )));
            }
        }
        Ok(())
    }

    /// Band membership. A hue band with `lo > hi` wraps through 0 degrees.
    #[inline]
    pub fn contains(&self, hsv: Hsv) -> bool {
        let (lo, hi) = (self.hsv_lo, self.hsv_hi);
        let hue_ok = if lo.h <= hi.h {
            hsv.h >= lo.h && hsv.h <= hi.h
        } else {
            hsv.h >= lo.h || hsv.h <= hi.h
        };
        hue_ok && hsv.s >= lo.s && hsv.s <= hi.s && hsv.v >= lo.v && hsv.v <= hi.v
    }
}

/// Binary mask `M_i` of activated pixels; the complement is `1 - M_i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationMask {
    pub plane: BitPlane,
}

impl ActivationMask {
    pub fn new(plane: BitPlane) -> Self {
        Self { plane }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self::new(BitPlane::ones(width, height))
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::new(BitPlane::zeros(width, height))
    }

    pub fn width(&self) -> usize {
        self.plane.width()
    }

    pub fn height(&self) -> usize {
        self.plane.height()
    }

    pub fn complement(&self) -> ActivationMask {
        ActivationMask::new(self.plane.complement())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskWeights {
    pub n_fg: usize,
    pub n_bg: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl MaskWeights {
    /// Both weights zero: the masked terms drop out (the unmasked ablation).
    pub fn disabled(n_fg: usize, n_bg: usize) -> Self {
        Self {
            n_fg,
            n_bg,
            alpha: 0.0,
            beta: 0.0,
        }
    }

    pub fn explicit(alpha: f64, beta: f64) -> Self {
        Self {
            n_fg: 0,
            n_bg: 0,
            alpha,
            beta,
        }
    }
}

pub fn extract_activation_mask(tile: &Raster, config: &StainConfig) -> Result<ActivationMask> {
    config.validate()?;
    if tile.channels() != 3 {
        return Err(Error::Shape(format!(
            "activation mask needs RGB, got {} channels",
            tile.channels()
        )));
    }
    Ok(ActivationMask::new(BitPlane::from_fn(
        tile.width(),
        tile.height(),
        |x, y| {
            let p = tile.pixel(x, y);
            config.contains(rgb_to_hsv_unchecked([p[0], p[1], p[2]]))
        },
    )))
}

/// `alpha = N_bg / (N_fg + N_bg)`, `beta = N_fg / (N_fg + N_bg)`.
pub fn compute_mask_weights(mask: &ActivationMask) -> Result<MaskWeights> {
    let total = mask.plane.len();
    if total == 0 {
        return Err(Error::Domain("zero-area mask".into()));
    }
    let n_fg = mask.plane.count_ones();
    let n_bg = total - n_fg;
    let t = total as f64;
    Ok(MaskWeights {
        n_fg,
        n_bg,
        alpha: n_bg as f64 / t,
        beta: n_fg as f64 / t,
    })
}

pub fn resize_mask(mask: &ActivationMask, width: usize, height: usize) -> ActivationMask {
    ActivationMask::new(mask.plane.resize_nearest(width.max(1), height.max(1)))
}

/// Degradation applied to both sides of the forward loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeSpec {
    /// Collapse RGB to Rec. 601 luminance first.
    pub luminance: bool,
    pub sigma: f64,
    /// Integer box-downsampling factor after blurring; 1 keeps resolution.
    pub downsample: usize,
}

impl Default for DegradeSpec {
    fn default() -> Self {
        Self {
            luminance: true,
            sigma: 3.0,
            downsample: 1,
        }
    }
}

impl DegradeSpec {
    pub fn identity() -> Self {
        Self {
            luminance: false,
            sigma: 0.0,
            downsample: 1,
        }
    }

    pub fn apply(&self, src: &Raster) -> Raster {
        let base = if self.luminance && src.channels() == 3 {
            src.luminance()
        } else {
            src.clone()
        };
        box_downsample(&gaussian_blur(&base, self.sigma), self.downsample)
    }

    /// Transpose of [`DegradeSpec::apply`] for a source of `width x height x channels`.
    pub fn adjoint(&self, grad: &Raster, width: usize, height: usize, channels: usize) -> Raster {
        let up = box_downsample_adjoint(grad, self.downsample, width, height);
        let g = gaussian_blur_adjoint(&up, self.sigma);
        if !(self.luminance && channels == 3) {
            return g;
        }
        Raster::from_fn(width, height, 3, |x, y, c| LUMA[c] * g.get(x, y, 0))
    }

    /// Degraded mask `m_i`: same blur and downsampling, re-thresholded at 0.5.
    pub fn apply_mask(&self, mask: &ActivationMask) -> ActivationMask {
        let soft = box_downsample(&gaussian_blur(&mask.plane.to_raster(), self.sigma), self.downsample);
        ActivationMask::new(BitPlane::from_fn(soft.width(), soft.height(), |x, y| {
            // exact halves can land a rounding step below 0.5
            soft.get(x, y, 0) >= 0.5 - 1e-12
        }))
    }
}
