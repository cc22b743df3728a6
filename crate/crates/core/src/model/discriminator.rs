//! Dual-head patch discriminator: a luminance head and an RGB head, each a
//! per-pixel feature layer, `p x p` average pooling and a per-patch affine
//! score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::{Activation, Init, LayerSpec, Network, NetworkCache};
use crate::error::{Error, Result};
use crate::raster::{Raster, LUMA};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscSpec {
    pub hidden: usize,
    pub patch: usize,
}

impl DiscSpec {
    fn head_layer(&self, in_ch: usize) -> LayerSpec {
        LayerSpec {
            in_ch,
            out_ch: self.hidden,
            depthwise: false,
            activation: Activation::Tanh,
        }
    }

    fn head_params(&self, in_ch: usize) -> usize {
        self.head_layer(in_ch).param_count() + self.hidden + 1
    }

    pub fn param_count(&self) -> usize {
        self.head_params(1) + self.head_params(3)
    }

    /// Score-raster dimensions for a `w x h` input.
    pub fn score_dims(&self, w: usize, h: usize) -> (usize, usize) {
        (w.div_ceil(self.patch), h.div_ceil(self.patch))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub spec: DiscSpec,
    pub params: Vec<f64>,
}

/// Raw outputs of both heads.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadScores {
    pub lum: Raster,
    pub rgb: Raster,
}

#[derive(Clone, Debug)]
struct HeadCache {
    net: NetworkCache,
    features: Raster,
    pooled: Raster,
}

#[derive(Clone, Debug)]
pub struct DiscCache {
    lum: HeadCache,
    rgb: HeadCache,
}

impl Discriminator {
    pub fn new(spec: DiscSpec, init: Init, rng: &mut impl Rng) -> Self {
        Self::with_feature_scale(spec, init, 0.0, rng)
    }

    /// Like [`Discriminator::new`], but a positive `feature_scale` (under
    /// `Noise` and `Identity`) draws feature weights from
    /// `[-feature_scale, feature_scale]` and centres each unit on a random
    /// point `c` of the unit cube (`b = -w.c`), so the heads start with
    /// curved, unsaturated colour features.
    pub fn with_feature_scale(spec: DiscSpec, init: Init, feature_scale: f64, rng: &mut impl Rng) -> Self {
        let lum = feature_layer(spec, 1, init, feature_scale, rng);
        let lum_aff = affine_init(spec.hidden, init, rng);
        let rgb = feature_layer(spec, 3, init, feature_scale, rng);
        let rgb_aff = affine_init(spec.hidden, init, rng);
        let mut params = lum.params;
        params.extend(lum_aff);
        params.extend(rgb.params);
        params.extend(rgb_aff);
        Self { spec, params }
    }

    pub fn from_params(spec: DiscSpec, params: Vec<f64>) -> Result<Self> {
        if params.len() != spec.param_count() {
            return Err(Error::Shape(format!(
                "{} discriminator parameters, expected {}",
                params.len(),
                spec.param_count()
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// `(feature net, affine)` parameter ranges of each head.
    fn ranges(&self) -> [(std::ops::Range<usize>, std::ops::Range<usize>); 2] {
        let s = &self.spec;
        let l_net = s.head_layer(1).param_count();
        let r_net = s.head_layer(3).param_count();
        let a = s.hidden + 1;
        let lum_net = 0..l_net;
        let lum_aff = l_net..l_net + a;
        let rgb_net = lum_aff.end..lum_aff.end + r_net;
        let rgb_aff = rgb_net.end..rgb_net.end + a;
        [(lum_net, lum_aff), (rgb_net, rgb_aff)]
    }

    fn head_net(&self, range: std::ops::Range<usize>, in_ch: usize) -> Network {
        Network {
            layers: vec![self.spec.head_layer(in_ch)],
            params: self.params[range].to_vec(),
        }
    }

    pub fn forward(&self, image: &Raster) -> Result<HeadScores> {
        Ok(self.forward_cached(image)?.0)
    }

    pub fn forward_cached(&self, image: &Raster) -> Result<(HeadScores, DiscCache)> {
        if image.channels() != 3 {
            return Err(Error::Shape(format!(
                "discriminator expects RGB, got {} channels",
                image.channels()
            )));
        }
        let [(ln, la), (rn, ra)] = self.ranges();
        let lum_in = image.luminance();
        let (lum, lc) = self.head(&lum_in, ln, la, 1)?;
        let (rgb, rc) = self.head(image, rn, ra, 3)?;
        Ok((HeadScores { lum, rgb }, DiscCache { lum: lc, rgb: rc }))
    }

    fn head(
        &self,
        input: &Raster,
        net_range: std::ops::Range<usize>,
        aff_range: std::ops::Range<usize>,
        in_ch: usize,
    ) -> Result<(Raster, HeadCache)> {
        let net = self.head_net(net_range, in_ch);
        let (features, cache) = net.forward_cached(input)?;
        let pooled = avg_pool(&features, self.spec.patch);
        let aff = &self.params[aff_range];
        let k = self.spec.hidden;
        let scores: Vec<f64> = pooled
            .data()
            .chunks_exact(k)
            .map(|f| f.iter().zip(&aff[..k]).map(|(a, b)| a * b).sum::<f64>() + aff[k])
            .collect();
        let out = Raster::from_vec(pooled.width(), pooled.height(), 1, scores)?;
        Ok((
            out,
            HeadCache {
                net: cache,
                features,
                pooled,
            },
        ))
    }

    /// Back-propagate score gradients of both heads. Adds parameter
    /// gradients into `grad` (when given) and returns the image gradient.
    pub fn backward(
        &self,
        cache: &DiscCache,
        d_lum: &Raster,
        d_rgb: &Raster,
        grad: Option<&mut [f64]>,
    ) -> Raster {
        let [(ln, la), (rn, ra)] = self.ranges();
        let mut scratch;
        let grad: &mut [f64] = match grad {
            Some(g) => g,
            None => {
                scratch = vec![0.0; self.params.len()];
                &mut scratch
            }
        };
        let d_lum_in = self.head_backward(&cache.lum, d_lum, ln, la, 1, grad);
        let mut d_img = self.head_backward(&cache.rgb, d_rgb, rn, ra, 3, grad);
        for (px, &g) in d_img.data_mut().chunks_exact_mut(3).zip(d_lum_in.data()) {
            for c in 0..3 {
                px[c] += LUMA[c] * g;
            }
        }
        d_img
    }

    fn head_backward(
        &self,
        cache: &HeadCache,
        d_score: &Raster,
        net_range: std::ops::Range<usize>,
        aff_range: std::ops::Range<usize>,
        in_ch: usize,
        grad: &mut [f64],
    ) -> Raster {
        let k = self.spec.hidden;
        let aff = &self.params[aff_range.clone()];
        let mut d_pooled = Raster::zeros(cache.pooled.width(), cache.pooled.height(), k);
        {
            let ga = &mut grad[aff_range];
            for (pi, &g) in d_score.data().iter().enumerate() {
                let f = &cache.pooled.data()[pi * k..(pi + 1) * k];
                for j in 0..k {
                    ga[j] += g * f[j];
                }
                ga[k] += g;
                let dp = &mut d_pooled.data_mut()[pi * k..(pi + 1) * k];
                for j in 0..k {
                    dp[j] = g * aff[j];
                }
            }
        }
        let d_feat = avg_pool_backward(&d_pooled, self.spec.patch, cache.features.width(), cache.features.height());
        let net = self.head_net(net_range.clone(), in_ch);
        net.backward(&cache.net, &d_feat, &mut grad[net_range])
    }
}

fn affine_init(hidden: usize, init: Init, rng: &mut impl Rng) -> Vec<f64> {
    match init {
        Init::Noise { scale } => (0..hidden)
            .map(|_| rng.gen_range(-scale..=scale))
            .chain(std::iter::once(0.0))
            .collect(),
        Init::Identity => {
            let mut v = vec![1.0 / hidden as f64; hidden];
            v.push(0.0);
            v
        }
        Init::Zero => vec![0.0; hidden + 1],
    }
}

fn feature_layer(spec: DiscSpec, in_ch: usize, init: Init, feature_scale: f64, rng: &mut impl Rng) -> Network {
    let layer = spec.head_layer(in_ch);
    if feature_scale <= 0.0 || init == Init::Zero {
        return Network::new(vec![layer], init, rng);
    }
    let w: Vec<f64> = (0..layer.out_ch * in_ch)
        .map(|_| rng.gen_range(-feature_scale..=feature_scale))
        .collect();
    let b: Vec<f64> = w
        .chunks_exact(in_ch)
        .map(|row| -row.iter().map(|wi| wi * rng.gen_range(0.0..1.0)).sum::<f64>())
        .collect();
    Network {
        layers: vec![layer],
        params: [w, b].concat(),
    }
}

/// Mean over `p x p` blocks; edge blocks average the pixels they contain.
pub fn avg_pool(x: &Raster, p: usize) -> Raster {
    crate::filter::box_downsample(x, p)
}

fn avg_pool_backward(d: &Raster, p: usize, w: usize, h: usize) -> Raster {
    crate::filter::box_downsample_adjoint(d, p, w, h)
}
