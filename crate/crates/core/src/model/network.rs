//! Per-pixel layer stacks: 1x1 channel mixing, optional 3x3 depthwise
//! smoothing, bias, bounded nonlinearity. Forward passes keep a cache so
//! the backward pass is exact reverse-mode differentiation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Half-width of the linear segment of [`Activation::SoftClip`].
const KNEE: f64 = 0.4;
const TAIL: f64 = 0.5 - KNEE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `0.5 + p` on `|p| <= 0.4`, tanh-saturating tails, range `[0, 1]`.
    SoftClip,
    Tanh,
    Linear,
}

impl Activation {
    #[inline]
    pub fn apply(self, p: f64) -> f64 {
        match self {
            Activation::SoftClip => {
                let a = p.abs();
                if a <= KNEE {
                    0.5 + p
                } else {
                    0.5 + p.signum() * (KNEE + TAIL * ((a - KNEE) / TAIL).tanh())
                }
            }
            Activation::Tanh => p.tanh(),
            Activation::Linear => p,
        }
    }

    #[inline]
    pub fn derivative(self, p: f64) -> f64 {
        match self {
            Activation::SoftClip => {
                let a = p.abs();
                if a <= KNEE {
                    1.0
                } else {
                    let t = ((a - KNEE) / TAIL).tanh();
                    1.0 - t * t
                }
            }
            Activation::Tanh => {
                let t = p.tanh();
                1.0 - t * t
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub depthwise: bool,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        self.out_ch * self.in_ch + self.out_ch + if self.depthwise { self.out_ch * 9 } else { 0 }
    }
}

pub fn stack_param_count(layers: &[LayerSpec]) -> usize {
    layers.iter().map(LayerSpec::param_count).sum()
}

/// How parameters are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform noise in `[-scale, scale]` for mixers and biases; depthwise
    /// kernels start at a centred delta plus the same noise.
    Noise { scale: f64 },
    /// Mixers pass the first `min(in, out)` channels through and biases put
    /// SoftClip inputs from `[0.1, 0.9]` on its linear segment.
    Identity,
    Zero,
}

impl Default for Init {
    fn default() -> Self {
        Init::Noise { scale: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<LayerSpec>,
    pub params: Vec<f64>,
}

struct LayerView<'a> {
    w: &'a [f64],
    b: &'a [f64],
    k: Option<&'a [f64]>,
}

/// Intermediate values of one layer kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerCache {
    input: Raster,
    mixed: Option<Raster>,
    pre: Raster,
}

#[derive(Clone, Debug)]
pub struct NetworkCache {
    layers: Vec<LayerCache>,
}

impl Network {
    pub fn new(layers: Vec<LayerSpec>, init: Init, rng: &mut impl Rng) -> Self {
        let mut params = Vec::with_capacity(stack_param_count(&layers));
        for l in &layers {
            let (nw, nb) = (l.out_ch * l.in_ch, l.out_ch);
            match init {
                Init::Noise { scale } => {
                    for _ in 0..nw + nb {
                        params.push(rng.gen_range(-scale..=scale));
                    }
                    if l.depthwise {
                        for _ in 0..l.out_ch {
                            for t in 0..9 {
                                let delta = if t == 4 { 1.0 } else { 0.0 };
                                params.push(delta + rng.gen_range(-scale..=scale));
                            }
                        }
                    }
                }
                Init::Identity => {
                    for o in 0..l.out_ch {
                        for i in 0..l.in_ch {
                            params.push(if o == i { 1.0 } else { 0.0 });
                        }
                    }
                    let bias = if l.activation == Activation::SoftClip { -0.5 } else { 0.0 };
                    params.extend(std::iter::repeat_n(bias, nb));
                    if l.depthwise {
                        for _ in 0..l.out_ch {
                            for t in 0..9 {
                                params.push(if t == 4 { 1.0 } else { 0.0 });
                            }
                        }
                    }
                }
                Init::Zero => params.extend(std::iter::repeat_n(0.0, l.param_count())),
            }
        }
        Self { layers, params }
    }

    pub fn from_params(layers: Vec<LayerSpec>, params: Vec<f64>) -> Result<Self> {
        let n = stack_param_count(&layers);
        if params.len() != n {
            return Err(Error::Shape(format!(
                "{} parameters for an architecture with {n}",
                params.len()
            )));
        }
        Ok(Self { layers, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn in_channels(&self) -> usize {
        self.layers.first().map_or(0, |l| l.in_ch)
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_ch)
    }

    fn views(&self) -> Vec<LayerView<'_>> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let nw = l.out_ch * l.in_ch;
                let w = &self.params[off..off + nw];
                off += nw;
                let b = &self.params[off..off + l.out_ch];
                off += l.out_ch;
                let k = if l.depthwise {
                    let k = &self.params[off..off + l.out_ch * 9];
                    off += l.out_ch * 9;
                    Some(k)
                } else {
                    None
                };
                LayerView { w, b, k }
            })
            .collect()
    }

    /// Offsets of `(weights, bias, kernel)` for each layer.
    fn offsets(&self) -> Vec<(usize, usize, Option<usize>)> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let w = off;
                off += l.out_ch * l.in_ch;
                let b = off;
                off += l.out_ch;
                let k = if l.depthwise {
                    let k = off;
                    off += l.out_ch * 9;
                    Some(k)
                } else {
                    None
                };
                (w, b, k)
            })
            .collect()
    }

    pub fn forward(&self, x: &Raster) -> Result<Raster> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Raster) -> Result<(Raster, NetworkCache)> {
        if x.channels() != self.in_channels() {
            return Err(Error::Shape(format!(
                "network expects {} channels, got {}",
                self.in_channels(),
                x.channels()
            )));
        }
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (spec, v) in self.layers.iter().zip(self.views()) {
            let mixed = mix(&cur, v.w, spec.in_ch, spec.out_ch);
            let (mut pre, mixed_kept) = match v.k {
                Some(k) => (depthwise(&mixed, k), Some(mixed)),
                None => (mixed, None),
            };
            let oc = spec.out_ch;
            for (i, p) in pre.data_mut().iter_mut().enumerate() {
                *p += v.b[i % oc];
            }
            let out = pre.map(|p| spec.activation.apply(p));
            caches.push(LayerCache {
                input: std::mem::replace(&mut cur, out),
                mixed: mixed_kept,
                pre,
            });
        }
        Ok((cur, NetworkCache { layers: caches }))
    }

    /// Back-propagate `dy`; adds parameter gradients into `grad` and
    /// returns the input gradient.
    pub fn backward(&self, cache: &NetworkCache, dy: &Raster, grad: &mut [f64]) -> Raster {
        debug_assert_eq!(grad.len(), self.params.len());
        let views = self.views();
        let offs = self.offsets();
        let mut d = dy.clone();
        for li in (0..self.layers.len()).rev() {
            let spec = &self.layers[li];
            let lc = &cache.layers[li];
            let v = &views[li];
            let (ow, ob, ok) = offs[li];
            let oc = spec.out_ch;
            // through the activation
            let mut dpre = d;
            for (g, &p) in dpre.data_mut().iter_mut().zip(lc.pre.data()) {
                *g *= spec.activation.derivative(p);
            }
            for (i, &g) in dpre.data().iter().enumerate() {
                grad[ob + i % oc] += g;
            }
            let dmixed = match (v.k, ok, &lc.mixed) {
                (Some(k), Some(ok), Some(mixed)) => {
                    depthwise_backward(mixed, k, &dpre, &mut grad[ok..ok + oc * 9])
                }
                _ => dpre,
            };
            d = mix_backward(&lc.input, v.w, &dmixed, spec.in_ch, oc, &mut grad[ow..ow + oc * spec.in_ch]);
        }
        d
    }
}

fn mix(x: &Raster, w: &[f64], ic: usize, oc: usize) -> Raster {
    let n = x.pixels();
    let mut out = vec![0.0; n * oc];
    let xd = x.data();
    for p in 0..n {
        let xi = &xd[p * ic..(p + 1) * ic];
        let o = &mut out[p * oc..(p + 1) * oc];
        for (oo, wrow) in o.iter_mut().zip(w.chunks_exact(ic)) {
            *oo = wrow.iter().zip(xi).map(|(a, b)| a * b).sum();
        }
    }
    Raster::from_vec(x.width(), x.height(), oc, out).expect("mix dims")
}

fn mix_backward(x: &Raster, w: &[f64], dout: &Raster, ic: usize, oc: usize, gw: &mut [f64]) -> Raster {
    let n = x.pixels();
    let xd = x.data();
    let dd = dout.data();
    let mut dx = vec![0.0; n * ic];
    for p in 0..n {
        let xi = &xd[p * ic..(p + 1) * ic];
        let dop = &dd[p * oc..(p + 1) * oc];
        let dxi = &mut dx[p * ic..(p + 1) * ic];
        for (o, &g) in dop.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let wrow = &w[o * ic..(o + 1) * ic];
            let grow = &mut gw[o * ic..(o + 1) * ic];
            for i in 0..ic {
                grow[i] += g * xi[i];
                dxi[i] += g * wrow[i];
            }
        }
    }
    Raster::from_vec(x.width(), x.height(), ic, dx).expect("mix dims")
}

#[inline]
fn clampi(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// Per-channel 3x3 correlation with clamp-to-edge sampling.
fn depthwise(x: &Raster, k: &[f64]) -> Raster {
    let (w, h, c) = (x.width(), x.height(), x.channels());
    let xd = x.data();
    let mut out = vec![0.0; w * h * c];
    for y in 0..h {
        for xx in 0..w {
            let o = (y * w + xx) * c;
            for t in 0..9 {
                let sy = clampi(y as isize + (t / 3) as isize - 1, h);
                let sx = clampi(xx as isize + (t % 3) as isize - 1, w);
                let s = (sy * w + sx) * c;
                for ch in 0..c {
                    out[o + ch] += k[ch * 9 + t] * xd[s + ch];
                }
            }
        }
    }
    Raster::from_vec(w, h, c, out).expect("depthwise dims")
}

fn depthwise_backward(x: &Raster, k: &[f64], dout: &Raster, gk: &mut [f64]) -> Raster {
    let (w, h, c) = (x.width(), x.height(), x.channels());
    let xd = x.data();
    let dd = dout.data();
    let mut dx = vec![0.0; w * h * c];
    for y in 0..h {
        for xx in 0..w {
            let o = (y * w + xx) * c;
            for t in 0..9 {
                let sy = clampi(y as isize + (t / 3) as isize - 1, h);
                let sx = clampi(xx as isize + (t % 3) as isize - 1, w);
                let s = (sy * w + sx) * c;
                for ch in 0..c {
                    let g = dd[o + ch];
                    gk[ch * 9 + t] += g * xd[s + ch];
                    dx[s + ch] += g * k[ch * 9 + t];
                }
            }
        }
    }
    Raster::from_vec(w, h, c, dx).expect("depthwise dims")
}
