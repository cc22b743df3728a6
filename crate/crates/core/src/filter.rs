//! Separable Gaussian filtering with clamp-to-edge boundaries, plus the
//! adjoint operator needed to back-propagate through it.

use crate::raster::Raster;

/// Normalized 1-D Gaussian taps, radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn pass(src: &Raster, kernel: &[f64], horizontal: bool) -> Raster {
    let r = (kernel.len() / 2) as isize;
    let (w, h, ch) = (src.width(), src.height(), src.channels());
    let mut out = Raster::zeros(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0.0;
                for (k, &t) in kernel.iter().enumerate() {
                    let o = k as isize - r;
                    let v = if horizontal {
                        src.get(clamp_idx(x as isize + o, w), y, c)
                    } else {
                        src.get(x, clamp_idx(y as isize + o, h), c)
                    };
                    acc += t * v;
                }
                out.set(x, y, c, acc);
            }
        }
    }
    out
}

fn pass_adjoint(grad: &Raster, kernel: &[f64], horizontal: bool) -> Raster {
    let r = (kernel.len() / 2) as isize;
    let (w, h, ch) = (grad.width(), grad.height(), grad.channels());
    let mut out = Raster::zeros(w, h, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let g = grad.get(x, y, c);
                if g == 0.0 {
                    continue;
                }
                for (k, &t) in kernel.iter().enumerate() {
                    let o = k as isize - r;
                    let (sx, sy) = if horizontal {
                        (clamp_idx(x as isize + o, w), y)
                    } else {
                        (x, clamp_idx(y as isize + o, h))
                    };
                    let i = out.index(sx, sy, c);
                    out.data_mut()[i] += t * g;
                }
            }
        }
    }
    out
}

pub fn gaussian_blur(src: &Raster, sigma: f64) -> Raster {
    if sigma <= 0.0 {
        return src.clone();
    }
    let k = gaussian_kernel(sigma);
    pass(&pass(src, &k, true), &k, false)
}

/// Transpose of [`gaussian_blur`] applied to an output-space gradient.
pub fn gaussian_blur_adjoint(grad: &Raster, sigma: f64) -> Raster {
    if sigma <= 0.0 {
        return grad.clone();
    }
    let k = gaussian_kernel(sigma);
    pass_adjoint(&pass_adjoint(grad, &k, false), &k, true)
}

/// Average-pool by an integer factor; trailing partial blocks average what exists.
pub fn box_downsample(src: &Raster, factor: usize) -> Raster {
    if factor <= 1 {
        return src.clone();
    }
    let (w, h, ch) = (src.width(), src.height(), src.channels());
    let (ow, oh) = (w.div_ceil(factor), h.div_ceil(factor));
    let mut out = Raster::zeros(ow, oh, ch);
    for oy in 0..oh {
        for ox in 0..ow {
            let ys = oy * factor..((oy + 1) * factor).min(h);
            let xs = ox * factor..((ox + 1) * factor).min(w);
            let n = (ys.len() * xs.len()) as f64;
            for c in 0..ch {
                let mut acc = 0.0;
                for y in ys.clone() {
                    for x in xs.clone() {
                        acc += src.get(x, y, c);
                    }
                }
                out.set(ox, oy, c, acc / n);
            }
        }
    }
    out
}

/// Transpose of [`box_downsample`]; `w`, `h` are the input dimensions.
pub fn box_downsample_adjoint(grad: &Raster, factor: usize, w: usize, h: usize) -> Raster {
    if factor <= 1 {
        return grad.clone();
    }
    let ch = grad.channels();
    let mut out = Raster::zeros(w, h, ch);
    for oy in 0..grad.height() {
        for ox in 0..grad.width() {
            let ys = oy * factor..((oy + 1) * factor).min(h);
            let xs = ox * factor..((ox + 1) * factor).min(w);
            let n = (ys.len() * xs.len()) as f64;
            for c in 0..ch {
                let g = grad.get(ox, oy, c) / n;
                for y in ys.clone() {
                    for x in xs.clone() {
                        let i = out.index(x, y, c);
                        out.data_mut()[i] += g;
                    }
                }
            }
        }
    }
    out
}
