//! Slide-level evaluation: tissue-restricted MSE, PSNR and SSIM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::gaussian_kernel;
use crate::raster::{BitPlane, Raster};
use crate::wsi::{ForegroundRule, WsiImage};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_pair(pred: &Raster, truth: &Raster) -> Result<()> {
    pred.check_same_dims(truth, "metric inputs")
}

/// Mean squared error over foreground pixels, averaged across channels.
pub fn mse_foreground(pred: &Raster, truth: &Raster, fg: &BitPlane) -> Result<f64> {
    check_pair(pred, truth)?;
    if fg.width() != pred.width() || fg.height() != pred.height() {
        return Err(Error::Shape(format!(
            "foreground {}x{} vs slide {}x{}",
            fg.width(),
            fg.height(),
            pred.width(),
            pred.height()
        )));
    }
    let ch = pred.channels();
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &m) in fg.data().iter().enumerate() {
        if m == 0 {
            continue;
        }
        for c in 0..ch {
            let d = pred.data()[i * ch + c] - truth.data()[i * ch + c];
            sum += d * d;
        }
        n += ch;
    }
    if n == 0 {
        return Err(Error::Domain("empty foreground".into()));
    }
    Ok(sum / n as f64)
}

/// `10 log10(1 / mse)` with MAX = 1, capped at 100 dB.
pub fn psnr(mse: f64) -> Result<f64> {
    if !(mse >= 0.0) {
        return Err(Error::Domain(format!("PSNR of mse {mse}")));
    }
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Valid-mode separable correlation with `k` along both axes.
fn correlate_valid(src: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

fn luminance_of(r: &Raster) -> Vec<f64> {
    match r.channels() {
        3 => r.luminance().into_data(),
        _ => r.data().iter().step_by(r.channels()).copied().collect(),
    }
}

/// Local SSIM values for every window that fits inside the image; entry
/// `(x, y)` belongs to the window centred on pixel `(x + 5, y + 5)`.
pub fn ssim_map(pred: &Raster, truth: &Raster) -> Result<Raster> {
    check_pair(pred, truth)?;
    let (w, h) = (pred.width(), pred.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Domain(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")));
    }
    let k = gaussian_kernel(SSIM_SIGMA);
    debug_assert_eq!(k.len(), SSIM_WINDOW);
    let a = luminance_of(pred);
    let b = luminance_of(truth);
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(&b).map(|(x, y)| f(*x, *y)).collect::<Vec<_>>();
    let (ma, ow, oh) = correlate_valid(&a, w, h, &k);
    let (mb, _, _) = correlate_valid(&b, w, h, &k);
    let (saa, _, _) = correlate_valid(&prod(&|x, _| x * x), w, h, &k);
    let (sbb, _, _) = correlate_valid(&prod(&|_, y| y * y), w, h, &k);
    let (sab, _, _) = correlate_valid(&prod(&|x, y| x * y), w, h, &k);
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let data = (0..ow * oh)
        .map(|i| {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cxy = sab[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .collect();
    Raster::from_vec(ow, oh, 1, data)
}

/// Mean local SSIM in percent.
pub fn ssim(pred: &Raster, truth: &Raster) -> Result<f64> {
    Ok(100.0 * ssim_map(pred, truth)?.mean())
}

/// Mean local SSIM (percent) over windows whose centre pixel is foreground.
pub fn ssim_foreground(pred: &Raster, truth: &Raster, fg: &BitPlane) -> Result<f64> {
    let map = ssim_map(pred, truth)?;
    let r = SSIM_WINDOW / 2;
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..map.height() {
        for x in 0..map.width() {
            if fg.get(x + r, y + r) {
                sum += map.get(x, y, 0);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Domain("no foreground SSIM window".into()));
    }
    Ok(100.0 * sum / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub foreground_pixels: usize,
}

/// Compare a generated slide with its ground truth over the tissue of the
/// aligned H&E source (all at level 0).
pub fn evaluate_wsi(pred: &WsiImage, truth: &WsiImage, he_source: &WsiImage) -> Result<SlideMetrics> {
    let (p, t, s) = (pred.base(), truth.base(), he_source.base());
    check_pair(p, t)?;
    if s.width() != p.width() || s.height() != p.height() {
        return Err(Error::Shape("H&E source is not aligned with the prediction".into()));
    }
    let fg = ForegroundRule::default().plane(s);
    let mse = mse_foreground(p, t, &fg)?;
    Ok(SlideMetrics {
        mse,
        psnr: psnr(mse)?,
        ssim: ssim_foreground(p, t, &fg)?,
        foreground_pixels: fg.count_ones(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(v: &[f64]) -> Self {
        if v.is_empty() {
            return Self::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StainEval {
    pub stain: String,
    pub slides: Vec<SlideMetrics>,
    /// MSE in units of 1e-2.
    pub mse_e2: MeanStd,
    pub psnr: MeanStd,
    pub ssim: MeanStd,
    pub foreground_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stains: Vec<StainEval>,
    pub overall_mse_e2: MeanStd,
    pub overall_psnr: MeanStd,
    pub overall_ssim: MeanStd,
}

pub fn aggregate(per_stain: Vec<(String, Vec<SlideMetrics>)>) -> EvalReport {
    let mut all = (Vec::new(), Vec::new(), Vec::new());
    let stains = per_stain
        .into_iter()
        .map(|(stain, slides)| {
            let mse: Vec<f64> = slides.iter().map(|s| s.mse * 100.0).collect();
            let ps: Vec<f64> = slides.iter().map(|s| s.psnr).collect();
            let ss: Vec<f64> = slides.iter().map(|s| s.ssim).collect();
            all.0.extend(&mse);
            all.1.extend(&ps);
            all.2.extend(&ss);
            StainEval {
                stain,
                mse_e2: MeanStd::of(&mse),
                psnr: MeanStd::of(&ps),
                ssim: MeanStd::of(&ss),
                foreground_pixels: slides.iter().map(|s| s.foreground_pixels).sum(),
                slides,
            }
        })
        .collect();
    EvalReport {
        stains,
        overall_mse_e2: MeanStd::of(&all.0),
        overall_psnr: MeanStd::of(&all.1),
        overall_ssim: MeanStd::of(&all.2),
    }
}
