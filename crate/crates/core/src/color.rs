//! Hexcone HSV conversion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hsv {
    pub h: f64,
    pub s: f64,
    pub v: f64,
}

impl Hsv {
    pub fn new(h: f64, s: f64, v: f64) -> Self {
        Self { h, s, v }
    }
}

/// Convert one RGB pixel. NaN channels are rejected.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> Result<Hsv> {
    if rgb.iter().any(|c| c.is_nan()) {
        return Err(Error::Domain(format!("NaN in RGB pixel {rgb:?}")));
    }
    Ok(rgb_to_hsv_unchecked(rgb))
}

#[inline]
pub(crate) fn rgb_to_hsv_unchecked([r, g, b]: [f64; 3]) -> Hsv {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let h = if h >= 360.0 { h - 360.0 } else { h };
    Hsv { h, s, v }
}

pub fn hsv_to_rgb(hsv: Hsv) -> [f64; 3] {
    let h = hsv.h.rem_euclid(360.0) / 60.0;
    let c = hsv.v * hsv.s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let m = hsv.v - c;
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Signed shortest angular difference `a - b` in degrees, in `(-180, 180]`.
pub fn hue_delta(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}
