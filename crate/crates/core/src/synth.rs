//! Procedural H&E scenes and their stain counterparts.
//!
//! A scene is value-noise tissue on a white background with stroma,
//! nuclei and a few cell subtypes. Stain `k` activates subtype `k`: those
//! pixels take the stain's chromogen colour, everything else goes through
//! the stain's affine counterstain transform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::Hsv;
use crate::error::{Error, Result};
use crate::raster::{BitPlane, Raster};
use crate::stain_mask::{ActivationMask, StainConfig};
use crate::wsi::{WsiImage, DEFAULT_MPP};

pub const MIN_SIZE: usize = 64;
pub const MAX_STAINS: usize = 8;

const BACKGROUND: [f64; 3] = [0.94, 0.93, 0.95];
const STROMA: [f64; 3] = [0.93, 0.6, 0.75];
const NUCLEUS: [f64; 3] = [0.3, 0.22, 0.5];

/// H&E appearance of the cell subtype activated by stain `k` (index k - 1).
const SUBTYPE_HE: [[f64; 3]; MAX_STAINS] = [
    [0.61, 0.54, 0.19],
    [0.95, 0.05, 0.33],
    [0.24, 0.63, 0.16],
    [0.3, 0.35, 0.65],
    [0.8, 0.62, 0.35],
    [0.65, 0.3, 0.6],
    [0.3, 0.55, 0.6],
    [0.45, 0.28, 0.3],
];

/// Chromogen colour of activated pixels in stain `k`.
const CHROMOGEN: [[f64; 3]; MAX_STAINS] = [
    [0.55, 0.33, 0.15],
    [0.78, 0.16, 0.2],
    [0.2, 0.55, 0.25],
    [0.15, 0.25, 0.7],
    [0.85, 0.6, 0.1],
    [0.7, 0.15, 0.6],
    [0.1, 0.55, 0.55],
    [0.3, 0.1, 0.35],
];

const STAIN_NAMES: [&str; MAX_STAINS] = ["cd3", "cd8", "ae1ae3", "cd68", "ki67", "cd20", "sox10", "p53"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthStainSpec {
    pub stain_id: usize,
    pub name: String,
    /// Row-major 3x3 matrix applied to H&E RGB outside activations.
    pub color_transform: [[f64; 3]; 3],
    pub bias: [f64; 3],
    pub activation_color: [f64; 3],
    /// Number of cell subtypes drawn into each scene.
    pub num_subtypes: usize,
    pub band_lo: Hsv,
    pub band_hi: Hsv,
}

impl SynthStainSpec {
    pub fn stain_config(&self) -> StainConfig {
        StainConfig {
            stain_id: self.stain_id,
            stain_name: self.name.clone(),
            hsv_lo: self.band_lo,
            hsv_hi: self.band_hi,
        }
    }

    pub fn transform(&self, rgb: [f64; 3]) -> [f64; 3] {
        let a = &self.color_transform;
        let mut out = [0.0; 3];
        for r in 0..3 {
            out[r] = (a[r][0] * rgb[0] + a[r][1] * rgb[1] + a[r][2] * rgb[2] + self.bias[r]).clamp(0.0, 1.0);
        }
        out
    }
}

/// Counterstain map: the grey component is pulled toward white `w` by
/// `gain` and the chroma is rotated by `theta` degrees about the grey axis
/// and scaled by `k`. Returns `(matrix, bias)`.
pub fn counterstain_transform(theta: f64, k: f64, gain: f64, w: f64) -> ([[f64; 3]; 3], [f64; 3]) {
    let t = theta.to_radians();
    let (c, s) = (t.cos(), t.sin());
    let u = 1.0 / 3f64.sqrt();
    let cross = [[0.0, -u, u], [u, 0.0, -u], [-u, u, 0.0]];
    let mut a = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { 1.0 } else { 0.0 };
            let r = c * id + s * cross[i][j] + (1.0 - c) * u * u;
            a[i][j] = (gain - k) / 3.0 + k * r;
        }
    }
    (a, [(1.0 - gain) * w; 3])
}

fn hsv_of(rgb: [f64; 3]) -> Hsv {
    crate::color::rgb_to_hsv_unchecked(rgb)
}

/// Default specs for stains `1..=s`.
pub fn default_stain_specs(s: usize) -> Result<Vec<SynthStainSpec>> {
    if s == 0 || s > MAX_STAINS {
        return Err(Error::Config(format!("synthetic stains must be 1..={MAX_STAINS}, got {s}")));
    }
    Ok((1..=s)
        .map(|k| {
            let chrom = CHROMOGEN[k - 1];
            let h = hsv_of(chrom).h;
            let (a, b) = counterstain_transform(-25.0 + 10.0 * (k - 1) as f64, 0.6, 0.8, 0.95);
            SynthStainSpec {
                stain_id: k,
                name: STAIN_NAMES[k - 1].to_string(),
                color_transform: a,
                bias: b,
                activation_color: chrom,
                num_subtypes: s,
                band_lo: Hsv::new((h - 15.0).rem_euclid(360.0), 0.5, 0.1),
                band_hi: Hsv::new((h + 15.0).rem_euclid(360.0), 1.0, 0.95),
            }
        })
        .collect())
}

/// H&E scene with per-pixel labels: 0 background, 1 stroma, 2 nucleus,
/// `2 + k` subtype `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub he: Raster,
    pub labels: Vec<u8>,
    pub tissue: BitPlane,
}

const LBL_BG: u8 = 0;
const LBL_STROMA: u8 = 1;
const LBL_NUCLEUS: u8 = 2;

/// Multi-octave value noise in `[0, 1]`.
fn value_noise(w: usize, h: usize, cell: f64, octaves: usize, rng: &mut impl Rng) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    let mut amp = 1.0;
    let mut total = 0.0;
    let mut c = cell;
    for _ in 0..octaves {
        let gw = (w as f64 / c).ceil() as usize + 2;
        let gh = (h as f64 / c).ceil() as usize + 2;
        let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.gen::<f64>()).collect();
        for y in 0..h {
            for x in 0..w {
                let fx = x as f64 / c;
                let fy = y as f64 / c;
                let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
                let (tx, ty) = (fx - ix as f64, fy - iy as f64);
                let (sx, sy) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
                let l = |i: usize, j: usize| lattice[j * gw + i];
                let top = l(ix, iy) * (1.0 - sx) + l(ix + 1, iy) * sx;
                let bot = l(ix, iy + 1) * (1.0 - sx) + l(ix + 1, iy + 1) * sx;
                out[y * w + x] += amp * (top * (1.0 - sy) + bot * sy);
            }
        }
        total += amp;
        amp *= 0.5;
        c /= 2.0;
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn paint_disk(labels: &mut [u8], w: usize, h: usize, cx: f64, cy: f64, r: f64, lbl: u8, allow: impl Fn(u8) -> bool) -> usize {
    let mut n = 0;
    let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w - 1));
    let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(h - 1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let i = y * w + x;
            if dx * dx + dy * dy <= r * r && allow(labels[i]) {
                labels[i] = lbl;
                n += 1;
            }
        }
    }
    n
}

/// Procedural H&E scene of `width x height` with `num_subtypes` activatable
/// cell subtypes, each covering 2-20% of the tissue.
pub fn synth_scene(width: usize, height: usize, num_subtypes: usize, seed: u64) -> Result<Scene> {
    if width < MIN_SIZE || height < MIN_SIZE {
        return Err(Error::Range(format!("synthetic scenes need at least {MIN_SIZE} px per side")));
    }
    if num_subtypes > MAX_STAINS {
        return Err(Error::Config(format!("at most {MAX_STAINS} subtypes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width, height);
    let blobs = value_noise(w, h, 24.0, 3, &mut rng);
    let mut sorted = blobs.clone();
    sorted.sort_by(f64::total_cmp);
    let tissue_q = rng.gen_range(0.3..0.5);
    let thr = sorted[(tissue_q * (sorted.len() - 1) as f64) as usize];
    let mut labels: Vec<u8> = blobs.iter().map(|&v| if v > thr { LBL_STROMA } else { LBL_BG }).collect();
    let tissue_px: Vec<usize> = (0..w * h).filter(|&i| labels[i] != LBL_BG).collect();
    let n_tissue = tissue_px.len();

    let pick_center = |rng: &mut ChaCha8Rng| {
        let i = tissue_px[rng.gen_range(0..n_tissue)];
        ((i % w) as f64 + rng.gen_range(0.0..1.0), (i / w) as f64 + rng.gen_range(0.0..1.0))
    };
    let nuclei_target = (0.08 * n_tissue as f64) as usize;
    let mut nuclei = 0;
    let mut guard = 0;
    while nuclei < nuclei_target && guard < 10_000 {
        let (cx, cy) = pick_center(&mut rng);
        nuclei += paint_disk(&mut labels, w, h, cx, cy, rng.gen_range(1.2..2.2), LBL_NUCLEUS, |l| l == LBL_STROMA);
        guard += 1;
    }
    for k in 1..=num_subtypes {
        let lbl = LBL_NUCLEUS + k as u8;
        let target = (rng.gen_range(0.03..0.07) * n_tissue as f64).ceil() as usize;
        let mut count = 0;
        let mut guard = 0;
        while count < target && guard < 10_000 {
            let (cx, cy) = pick_center(&mut rng);
            let r = rng.gen_range(2.0..3.5);
            count += paint_disk(&mut labels, w, h, cx, cy, r, lbl, |l| l == LBL_STROMA || l == LBL_NUCLEUS);
            guard += 1;
        }
    }

    let shade = value_noise(w, h, 10.0, 2, &mut rng);
    let mut he = Raster::zeros(w, h, 3);
    for i in 0..w * h {
        let base = match labels[i] {
            LBL_BG => BACKGROUND,
            LBL_STROMA => STROMA,
            LBL_NUCLEUS => NUCLEUS,
            l => SUBTYPE_HE[(l - LBL_NUCLEUS - 1) as usize],
        };
        let (x, y) = (i % w, i / w);
        let amp = if labels[i] == LBL_BG { 0.01 } else { 0.06 };
        let s = 1.0 + amp * (2.0 * shade[i] - 1.0);
        let p = he.pixel_mut(x, y);
        for c in 0..3 {
            p[c] = (base[c] * s + rng.gen_range(-0.015..0.015)).clamp(0.0, 1.0);
        }
    }
    let tissue = BitPlane::from_fn(w, h, |x, y| labels[y * w + x] != LBL_BG);
    Ok(Scene { he, labels, tissue })
}

/// Stain rendering of a scene and the true activation mask.
pub fn render_stain(scene: &Scene, spec: &SynthStainSpec, seed: u64) -> (Raster, ActivationMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_57a1 ^ ((spec.stain_id as u64) << 32));
    let (w, h) = (scene.he.width(), scene.he.height());
    let act = LBL_NUCLEUS + spec.stain_id as u8;
    let mut out = Raster::zeros(w, h, 3);
    let plane = BitPlane::from_fn(w, h, |x, y| scene.labels[y * w + x] == act);
    for y in 0..h {
        for x in 0..w {
            let rgb = if plane.get(x, y) {
                let a = spec.activation_color;
                [0, 1, 2].map(|c| (a[c] + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0))
            } else {
                let p = scene.he.pixel(x, y);
                spec.transform([p[0], p[1], p[2]])
            };
            out.pixel_mut(x, y).copy_from_slice(&rgb);
        }
    }
    (out, ActivationMask::new(plane))
}

/// `(he_tile, stain_tile, truth_mask)` for one seed.
pub fn generate_synth_pair(spec: &SynthStainSpec, size: usize, seed: u64) -> Result<(Raster, Raster, ActivationMask)> {
    let scene = synth_scene(size, size, spec.num_subtypes.max(spec.stain_id), seed)?;
    let (stain, mask) = render_stain(&scene, spec, seed);
    Ok((scene.he, stain, mask))
}

/// An aligned H&E slide and its stain slides.
#[derive(Clone, Debug)]
pub struct SynthSlideSet {
    pub he: WsiImage,
    pub stains: Vec<(SynthStainSpec, WsiImage)>,
}

pub fn generate_synth_slides(specs: &[SynthStainSpec], width: usize, height: usize, seed: u64) -> Result<SynthSlideSet> {
    let n = specs.iter().map(|s| s.num_subtypes.max(s.stain_id)).max().unwrap_or(0);
    let scene = synth_scene(width, height, n, seed)?;
    let stains = specs
        .iter()
        .map(|s| {
            let (r, _) = render_stain(&scene, s, seed);
            Ok((s.clone(), WsiImage::from_base(r, DEFAULT_MPP, 64)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthSlideSet {
        he: WsiImage::from_base(scene.he, DEFAULT_MPP, 64)?,
        stains,
    })
}
