//! Quality control from discriminator outputs: confidence maps, std-based
//! anomaly verdicts, synthetic defects and Jet heatmaps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::{hsv_to_rgb, rgb_to_hsv_unchecked, Hsv};
use crate::error::{Error, Result};
use crate::model::Discriminator;
use crate::raster::Raster;

/// Example acceptance band (std of `c_all`, percent) reported for a large
/// H&E corpus. Calibrate locally with [`calibrate_interval`].
pub const EXAMPLE_INTERVAL: (f64, f64) = (3.11, 14.86);

/// Hue rotation (degrees) of a full-magnitude global shift.
pub const GLOBAL_HUE_SHIFT: f64 = 60.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap {
    pub c_lum: Raster,
    pub c_rgb: Raster,
    pub c_all: Raster,
}

/// Clamp both head rasters to `[-1, 1]`, resize them bilinearly to
/// `width x height`, take the pixel-wise minimum and map it to `[0, 1]`.
pub fn combine_heads(lum: &Raster, rgb: &Raster, width: usize, height: usize) -> ConfidenceMap {
    let c_lum = lum.map(|v| v.clamp(-1.0, 1.0)).resize_bilinear(width, height);
    let c_rgb = rgb.map(|v| v.clamp(-1.0, 1.0)).resize_bilinear(width, height);
    let c_all = c_lum
        .zip_map(&c_rgb, |a, b| (a.min(b) + 1.0) / 2.0)
        .expect("same dims after resize");
    ConfidenceMap { c_lum, c_rgb, c_all }
}

pub fn confidence_map(d: &Discriminator, tile: &Raster) -> Result<ConfidenceMap> {
    if tile.channels() != 3 {
        return Err(Error::Contract(format!(
            "confidence map needs an RGB tile, got {} channels",
            tile.channels()
        )));
    }
    let s = d.forward(tile)?;
    Ok(combine_heads(&s.lum, &s.rgb, tile.width(), tile.height()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Authentic,
    OutlierLow,
    OutlierHigh,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyStats {
    pub std_percent: f64,
    pub interval_lo: f64,
    pub interval_hi: f64,
    pub verdict: Verdict,
}

impl AnomalyStats {
    /// Distance from the band centre in half-widths; > 1 means outside.
    pub fn score(&self) -> f64 {
        let mid = 0.5 * (self.interval_lo + self.interval_hi);
        let half = (0.5 * (self.interval_hi - self.interval_lo)).max(1e-9);
        (self.std_percent - mid).abs() / half
    }
}

/// Population standard deviation of `c_all`, in percent.
pub fn std_percent(map: &ConfidenceMap) -> f64 {
    let d = map.c_all.data();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    100.0 * var.sqrt()
}

pub fn verdict_for(std_pct: f64, interval: (f64, f64)) -> Verdict {
    if std_pct <= interval.0 {
        Verdict::OutlierLow
    } else if std_pct >= interval.1 {
        Verdict::OutlierHigh
    } else {
        Verdict::Authentic
    }
}

pub fn anomaly_stats(map: &ConfidenceMap, interval: (f64, f64)) -> AnomalyStats {
    let s = std_percent(map);
    AnomalyStats {
        std_percent: s,
        interval_lo: interval.0,
        interval_hi: interval.1,
        verdict: verdict_for(s, interval),
    }
}

/// Linear-interpolated percentile of sorted data, `p` in `[0, 100]`.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = p.clamp(0.0, 100.0) / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// `(lo_pct, hi_pct)` percentiles of a set of std values.
pub fn calibrate_from_stds(stds: &[f64], lo_pct: f64, hi_pct: f64) -> Result<(f64, f64)> {
    if stds.is_empty() {
        return Err(Error::Domain("cannot calibrate on zero maps".into()));
    }
    if stds.iter().any(|v| v.is_nan()) {
        return Err(Error::Domain("NaN std value".into()));
    }
    let mut v = stds.to_vec();
    v.sort_by(f64::total_cmp);
    Ok((percentile(&v, lo_pct), percentile(&v, hi_pct)))
}

pub fn calibrate_interval<'a>(
    maps: impl IntoIterator<Item = &'a ConfidenceMap>,
    lo_pct: f64,
    hi_pct: f64,
) -> Result<(f64, f64)> {
    let stds: Vec<f64> = maps.into_iter().map(std_percent).collect();
    calibrate_from_stds(&stds, lo_pct, hi_pct)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    GlobalShift,
    LocalBlob,
    Droplet,
}

impl DefectKind {
    pub const ALL: [DefectKind; 3] = [DefectKind::GlobalShift, DefectKind::LocalBlob, DefectKind::Droplet];
}

/// Synthetic staining/scanning defect. Deterministic in `seed`; magnitude 0
/// returns the tile unchanged.
pub fn degrade_tile(tile: &Raster, kind: DefectKind, magnitude: f64, seed: u64) -> Result<Raster> {
    if !(0.0..=1.0).contains(&magnitude) {
        return Err(Error::Range(format!("defect magnitude {magnitude} outside [0, 1]")));
    }
    if tile.channels() != 3 {
        return Err(Error::Shape("defects apply to RGB tiles".into()));
    }
    if magnitude == 0.0 {
        return Ok(tile.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (tile.width() as f64, tile.height() as f64);
    let side = w.min(h);
    let mut out = tile.clone();
    match kind {
        DefectKind::GlobalShift => {
            let dh = magnitude * GLOBAL_HUE_SHIFT;
            let dv = 1.0 - 0.25 * magnitude;
            for px in out.data_mut().chunks_exact_mut(3) {
                let hsv = rgb_to_hsv_unchecked([px[0], px[1], px[2]]);
                let rgb = hsv_to_rgb(Hsv::new((hsv.h + dh).rem_euclid(360.0), hsv.s, hsv.v * dv));
                px.copy_from_slice(&rgb);
            }
        }
        DefectKind::LocalBlob => {
            let cx = rng.gen_range(0.25..0.75) * w;
            let cy = rng.gen_range(0.25..0.75) * h;
            let r0 = side * rng.gen_range(0.18..0.3);
            let harm: Vec<(f64, f64)> = (2..5).map(|k| (rng.gen_range(0.05..0.2) / k as f64 * 2.0, rng.gen_range(0.0..std::f64::consts::TAU))).collect();
            let dark = [0.18, 0.1, 0.2];
            for y in 0..tile.height() {
                for x in 0..tile.width() {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let th = dy.atan2(dx);
                    let r = r0 * (1.0 + harm.iter().enumerate().map(|(i, (a, p))| a * ((i + 2) as f64 * th + p).sin()).sum::<f64>());
                    let d = (dx * dx + dy * dy).sqrt();
                    let inside = ((r - d) / 2.0).clamp(0.0, 1.0);
                    let a = 0.85 * magnitude * inside;
                    let p = out.pixel_mut(x, y);
                    for c in 0..3 {
                        p[c] = p[c] * (1.0 - a) + dark[c] * a;
                    }
                }
            }
        }
        DefectKind::Droplet => {
            let cx = rng.gen_range(0.3..0.7) * w;
            let cy = rng.gen_range(0.3..0.7) * h;
            let r = side * rng.gen_range(0.2..0.32);
            let ring = (side * 0.05).max(1.5);
            let src = tile.clone();
            for y in 0..tile.height() {
                for x in 0..tile.width() {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let d = (dx * dx + dy * dy).sqrt();
                    if d > r + ring {
                        continue;
                    }
                    let p = out.pixel_mut(x, y);
                    if d <= r {
                        // lens: sample closer to the centre, wash towards white
                        let k = 1.0 - 0.35 * magnitude * (1.0 - (d / r).powi(2));
                        let sx = (cx + dx * k - 0.5).round().clamp(0.0, w - 1.0) as usize;
                        let sy = (cy + dy * k - 0.5).round().clamp(0.0, h - 1.0) as usize;
                        let s = src.pixel(sx, sy);
                        let wash = 0.55 * magnitude;
                        for c in 0..3 {
                            p[c] = s[c] * (1.0 - wash) + wash;
                        }
                    }
                    let edge = 1.0 - ((d - r).abs() / ring).min(1.0);
                    let dim = 1.0 - 0.75 * magnitude * edge;
                    for v in p.iter_mut() {
                        *v *= dim;
                    }
                }
            }
        }
    }
    Ok(out.clamp01())
}

/// Standard Jet ramp: dark blue at 0, through cyan, green and yellow, to
/// dark red at 1.
pub fn jet(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let f = |o: f64| (1.5 - (4.0 * t - o).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub rgb: Raster,
}

/// `Jet(1 - c_all)`, optionally blended half-and-half over `base`.
pub fn render_heatmap(map: &ConfidenceMap, base: Option<&Raster>) -> Result<Heatmap> {
    let c = &map.c_all;
    if let Some(b) = base {
        if b.width() != c.width() || b.height() != c.height() || b.channels() != 3 {
            return Err(Error::Shape("heatmap base does not match the map".into()));
        }
    }
    let rgb = Raster::from_fn(c.width(), c.height(), 3, |x, y, ch| {
        let j = jet(1.0 - c.get(x, y, 0))[ch];
        match base {
            Some(b) => 0.5 * j + 0.5 * b.get(x, y, ch),
            None => j,
        }
    });
    Ok(Heatmap { rgb })
}

/// Area under the ROC curve for "positives score higher", ties counted half.
pub fn roc_auc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Domain("ROC-AUC needs both classes".into()));
    }
    let mut wins = 0.0;
    for &p in positives {
        for &n in negatives {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (positives.len() * negatives.len()) as f64)
}
