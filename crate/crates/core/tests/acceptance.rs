mod common;

use std::f64::consts::PI;
use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vstain_core::checkpoint::{self, AccessLog, Manifest};
use vstain_core::loss::*;
use vstain_core::metrics::{mse_foreground, psnr, ssim};
use vstain_core::model::objective::{disc_step, generator_step};
use vstain_core::model::{count_parameters, ArchSpec, Component, Domain, Init, ModelBank, ModelTriple};
use vstain_core::qc::{anomaly_stats, calibrate_interval, confidence_map, degrade_tile, roc_auc, DefectKind, Verdict};
use vstain_core::raster::{BitPlane, Raster, LUMA};
use vstain_core::stain_mask::{compute_mask_weights, ActivationMask, DegradeSpec, MaskWeights};
use vstain_core::stitch::{hamming_2d, stitch_wsi, GridTile};
use vstain_core::synth::{default_stain_specs, render_stain, synth_scene, Scene, SynthStainSpec};
use vstain_core::train::{sample_batch, PairSet, Phase, Trainer, TrainingConfig};
use vstain_core::wsi::{build_tile_grid, ForegroundRule, GridOptions, Magnification, WsiImage};

/// One line per criterion, written past the test harness capture.
fn verdict(n: usize, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2} {tag}  {name}: {detail}");
}

fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        (got - want).abs() / want.abs()
    }
}

// ---------------------------------------------------------------- oracles

fn mask_at(m: Option<&BitPlane>, x: usize, y: usize) -> f64 {
    match m {
        None => 1.0,
        Some(p) => {
            if p.get(x, y) {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Mean of `|m a - m b|` by explicit loops.
fn o_l1(a: &Raster, b: &Raster, m: Option<&BitPlane>) -> f64 {
    let mut s = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            let w = mask_at(m, x, y);
            for c in 0..a.channels() {
                s += (w * a.get(x, y, c) - w * b.get(x, y, c)).abs();
            }
        }
    }
    s / (a.width() * a.height() * a.channels()) as f64
}

/// Mean of `(m s - t)^2` by explicit loops.
fn o_sq(s: &Raster, m: Option<&BitPlane>, t: f64) -> f64 {
    let mut acc = 0.0;
    for y in 0..s.height() {
        for x in 0..s.width() {
            let w = mask_at(m, x, y);
            for c in 0..s.channels() {
                acc += (w * s.get(x, y, c) - t).powi(2);
            }
        }
    }
    acc / (s.width() * s.height() * s.channels()) as f64
}

fn o_l1_weighted(a: &Raster, b: &Raster, m: &BitPlane, al: f64, be: f64) -> f64 {
    let comp = m.complement();
    o_l1(a, b, None) + al * o_l1(a, b, Some(m)) + be * o_l1(a, b, Some(&comp))
}

fn o_sq_weighted(s: &Raster, m: &BitPlane, al: f64, be: f64, t: f64) -> f64 {
    let comp = m.complement();
    o_sq(s, None, t) + al * o_sq(s, Some(m), t) + be * o_sq(s, Some(&comp), t)
}

/// Degradation by direct 2-D summation: luminance, clamp-to-edge Gaussian
/// with radius `ceil(3 sigma)`, then block averaging.
fn o_degrade(src: &Raster, d: &DegradeSpec) -> Raster {
    let (w, h) = (src.width(), src.height());
    let lum = d.luminance && src.channels() == 3;
    let ch = if lum { 1 } else { src.channels() };
    let base = |x: usize, y: usize, c: usize| -> f64 {
        if lum {
            (0..3).map(|k| LUMA[k] * src.get(x, y, k)).sum()
        } else {
            src.get(x, y, c)
        }
    };
    let blurred = if d.sigma > 0.0 {
        let r = (3.0 * d.sigma).ceil() as isize;
        let g = |i: isize| (-((i * i) as f64) / (2.0 * d.sigma * d.sigma)).exp();
        let norm: f64 = (-r..=r).map(g).sum::<f64>().powi(2);
        Raster::from_fn(w, h, ch, |x, y, c| {
            let mut s = 0.0;
            for j in -r..=r {
                for i in -r..=r {
                    let sx = (x as isize + i).clamp(0, w as isize - 1) as usize;
                    let sy = (y as isize + j).clamp(0, h as isize - 1) as usize;
                    s += g(i) * g(j) * base(sx, sy, c);
                }
            }
            s / norm
        })
    } else {
        Raster::from_fn(w, h, ch, base)
    };
    let f = d.downsample.max(1);
    if f == 1 {
        return blurred;
    }
    let (ow, oh) = (w.div_ceil(f), h.div_ceil(f));
    Raster::from_fn(ow, oh, ch, |ox, oy, c| {
        let mut s = 0.0;
        let mut n = 0.0;
        for y in oy * f..((oy + 1) * f).min(h) {
            for x in ox * f..((ox + 1) * f).min(w) {
                s += blurred.get(x, y, c);
                n += 1.0;
            }
        }
        s / n
    })
}

fn o_degrade_mask(m: &BitPlane, d: &DegradeSpec) -> BitPlane {
    let soft = o_degrade(&m.to_raster(), &DegradeSpec { luminance: false, ..*d });
    // values that are exactly one half in exact arithmetic count as inside
    BitPlane::from_fn(soft.width(), soft.height(), |x, y| soft.get(x, y, 0) >= 0.5 - 1e-9)
}

fn rand_raster(rng: &mut ChaCha8Rng, w: usize, h: usize, c: usize, lo: f64, hi: f64) -> Raster {
    Raster::from_fn(w, h, c, |_, _, _| rng.gen_range(lo..hi))
}

fn rand_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> BitPlane {
    let p = match rng.gen_range(0..4) {
        0 => 0.0,
        1 => 1.0,
        _ => rng.gen_range(0.05..0.95),
    };
    BitPlane::from_fn(w, h, |_, _| rng.gen_bool(p))
}

fn rand_pack(rng: &mut ChaCha8Rng, w: usize, h: usize, lat: usize, paired: bool) -> CyclePack {
    let mut img = || rand_raster(rng, w, h, 3, 0.0, 1.0);
    let (x_he, y_hat_i, x_hat_he, x_i, y_hat_he, x_hat_i) = (img(), img(), img(), img(), img(), img());
    let mut latent = || rand_raster(rng, w, h, lat, -1.0, 1.0);
    let (z_he, z_hat_he, z_i, z_hat_i) = (latent(), latent(), latent(), latent());
    let mask = ActivationMask::new(rand_mask(rng, w, h));
    let weights = compute_mask_weights(&mask).unwrap();
    CyclePack {
        stain: 1,
        he: HeCycle { x_he, z_he, y_hat_i, z_hat_he, x_hat_he },
        st: StainCycle { x_i, z_i, y_hat_he, z_hat_i, x_hat_i },
        mask: Some(mask),
        weights: Some(weights),
        paired,
    }
}

// ------------------------------------------------------------ criterion 1

#[test]
fn c01_loss_kernels_match_scalar_oracles() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_name = "";
    let mut evaluated = 0usize;
    let mut track = |name: &'static str, got: f64, want: f64| {
        let e = rel_err(got, want);
        if e > worst {
            worst = e;
            worst_name = name;
        }
        evaluated += 1;
    };
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, h) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let paired = seed % 2 == 1;
        let lat = rng.gen_range(1..=8);
        let p = rand_pack(&mut rng, w, h, lat, paired);
        let m = &p.mask.as_ref().unwrap().plane;
        let mw = p.weights.unwrap();
        let (al, be) = (mw.alpha, mw.beta);
        let (he, st) = (&p.he, &p.st);

        let base_cyc = o_l1(&st.x_hat_i, &st.x_i, None) + o_l1(&he.x_hat_he, &he.x_he, None);
        let comp = m.complement();
        let st_m = o_l1(&st.x_hat_i, &st.x_i, Some(m));
        let st_c = o_l1(&st.x_hat_i, &st.x_i, Some(&comp));
        let he_m = o_l1(&he.x_hat_he, &he.x_he, Some(m));
        let he_c = o_l1(&he.x_hat_he, &he.x_he, Some(&comp));
        track("cycle_unpaired", cycle_loss_unpaired(&p).unwrap(), base_cyc + al * st_m + be * st_c);
        track("cycle_paired", cycle_loss_paired(&p).unwrap(), base_cyc + al * (st_m + he_m) + be * (st_c + he_c));
        if paired {
            let want = o_l1_weighted(&he.y_hat_i, &st.x_i, m, al, be) + o_l1_weighted(&st.y_hat_he, &he.x_he, m, al, be);
            track("supervised", supervised_loss(&p).unwrap(), want);
        } else {
            assert!(supervised_loss(&p).is_err());
        }

        // adversarial and discriminator kernels at score resolution
        let (sw, sh) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let d_i = rand_raster(&mut rng, sw, sh, 1, -1.5, 1.5);
        let d_he = rand_raster(&mut rng, sw, sh, 1, -1.5, 1.5);
        let sm = ActivationMask::new(rand_mask(&mut rng, sw, sh));
        let sw_ = MaskWeights::explicit(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        let (sa, sb) = (sw_.alpha, sw_.beta);
        let smc = sm.plane.complement();
        let lit_u = o_sq(&d_i, None, 1.0) + sa * o_sq(&d_he, Some(&sm.plane), 1.0) + sb * o_sq(&d_he, Some(&smc), 1.0);
        track("adv_unpaired", adv_loss_unpaired(&d_i, &d_he, &sm, &sw_).unwrap(), lit_u);
        track(
            "adv_unpaired_sym",
            adv_terms_unpaired(&d_i, &d_he, &sm, AdvForm::Symmetric).unwrap().total(&sw_),
            lit_u + o_sq(&d_he, None, 1.0),
        );
        let lit_p = o_sq(&d_he, None, 1.0)
            + sa * (o_sq(&d_he, Some(&sm.plane), 1.0) + o_sq(&d_i, Some(&sm.plane), 1.0))
            + sb * (o_sq(&d_he, Some(&smc), 1.0) + o_sq(&d_i, Some(&smc), 1.0));
        track("adv_paired", adv_loss_paired(&d_i, &d_he, &sm, &sw_).unwrap(), lit_p);
        track(
            "adv_paired_sym",
            adv_terms_paired(&d_i, &d_he, &sm, AdvForm::Symmetric).unwrap().total(&sw_),
            lit_p + o_sq(&d_i, None, 1.0),
        );
        let ld = rng.gen_range(0.1..2.0);
        track(
            "disc_stain",
            disc_loss_stain(&d_i, &d_he, &sm, &sw_, ld).unwrap(),
            ld * (o_sq_weighted(&d_i, &sm.plane, sa, sb, 1.0) + o_sq(&d_he, None, 0.0)),
        );
        track("disc_he", disc_loss_he(&d_i, &d_he, ld).unwrap(), ld * (o_sq(&d_i, None, 1.0) + o_sq(&d_he, None, 0.0)));

        // regularizers
        let mask = p.mask.as_ref().unwrap();
        track(
            "identity_stain",
            identity_loss(Branch::Stain, &st.x_i, &st.x_hat_i, Some(mask), Some(&mw)).unwrap(),
            o_l1_weighted(&st.x_hat_i, &st.x_i, m, al, be),
        );
        track("identity_he", identity_loss(Branch::He, &he.x_he, &he.x_hat_he, None, None).unwrap(), o_l1(&he.x_hat_he, &he.x_he, None));
        track(
            "latent_stain",
            latent_loss(Branch::Stain, &st.z_i, &st.z_hat_i, Some(mask), Some(&mw)).unwrap(),
            o_l1_weighted(&st.z_hat_i, &st.z_i, m, al, be),
        );
        track("latent_he", latent_loss(Branch::He, &he.z_he, &he.z_hat_he, None, None).unwrap(), o_l1(&he.z_hat_he, &he.z_he, None));
        let dg = DegradeSpec {
            luminance: rng.gen_bool(0.7),
            sigma: [0.0, 0.7, 1.5, 3.0][rng.gen_range(0..4)],
            downsample: rng.gen_range(1..=3),
        };
        let xs = o_degrade(&st.x_i, &dg);
        let ys = o_degrade(&st.y_hat_he, &dg);
        let small = o_degrade_mask(m, &dg);
        track(
            "forward_stain",
            forward_loss(Branch::Stain, &st.x_i, &st.y_hat_he, Some(mask), Some(&mw), &dg).unwrap(),
            o_l1_weighted(&ys, &xs, &small, al, be),
        );
        track(
            "forward_he",
            forward_loss(Branch::He, &he.x_he, &he.y_hat_i, None, None, &dg).unwrap(),
            o_l1(&o_degrade(&he.y_hat_i, &dg), &o_degrade(&he.x_he, &dg), None),
        );

        // weighted sums
        let lw = LossWeights {
            lambda_cyc: rng.gen_range(0.0..20.0),
            lambda_adv: rng.gen_range(0.0..2.0),
            lambda_reg: rng.gen_range(0.0..2.0),
            lambda_d: 0.5,
            lambda_idt: rng.gen_range(0.0..2.0),
            lambda_lat: rng.gen_range(0.0..2.0),
            lambda_fwd: rng.gen_range(0.0..2.0),
        };
        let (i, l, f) = (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
        let reg = reg_loss(i, l, f, &lw);
        track("reg", reg, lw.lambda_idt * i + lw.lambda_lat * l + lw.lambda_fwd * f);
        let (c, a) = (rng.gen::<f64>(), rng.gen::<f64>());
        track("synthesis", synthesis_loss(c, a, reg, &lw), lw.lambda_cyc * c + lw.lambda_adv * a + lw.lambda_reg * reg);
        let ihc: Vec<f64> = (0..rng.gen_range(1..=8)).map(|_| rng.gen_range(0.0..5.0)).collect();
        let mut mean = 0.0;
        for v in &ihc {
            mean += v;
        }
        track("he_regularization", he_regularization_loss(&ihc).unwrap(), mean / ihc.len() as f64);
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-10 && secs < 30.0;
    verdict(
        1,
        "loss kernels vs scalar oracles",
        pass,
        &format!("{evaluated} evaluations, worst rel err {worst:.2e} ({worst_name}), {secs:.1}s"),
    );
    assert!(worst <= 1e-10, "worst relative error {worst:e} in {worst_name}");
    assert!(secs < 30.0, "took {secs:.1}s");
}

// ------------------------------------------------------------ criterion 2

#[test]
fn c02_gradients_match_finite_differences() {
    let start = Instant::now();
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0usize, 0usize);
    let mut worst_d: f64 = 0.0;
    for seed in 0..20u64 {
        let fx = common::grad_fixture(100 + seed, 8, seed % 2 == 1, seed % 4 >= 2);
        let step = generator_step(&fx.bank, &fx.x_he, &fx.x_i, fx.stain, &fx.mask, &fx.mw, &fx.cfg).unwrap();
        let an = |d: Domain, c: Component| match (d, c) {
            (Domain::He, Component::Encoder) => step.grads.e_he.clone(),
            (Domain::He, Component::Generator) => step.grads.g_he.clone(),
            (_, Component::Encoder) => step.grads.e_i.clone(),
            _ => step.grads.g_i.clone(),
        };
        let r = common::fd_check(&fx, &an, 1e-4, 1e-3);
        worst = worst.max(r.worst);
        checked += r.checked;
        skipped += r.skipped;

        // both discriminators of the step
        let si = Domain::Stain(fx.stain);
        for (dom, real, fake, masked) in [(si, &fx.x_i, &step.y_hat_i, true), (Domain::He, &fx.x_he, &step.y_hat_he, false)] {
            let mut d = fx.bank.discriminator(dom).unwrap().clone();
            let mk = if masked { Some((&fx.mask, &fx.mw)) } else { None };
            let (_, g) = disc_step(&d, real, fake, mk, 0.5).unwrap();
            for k in 0..g.len() {
                let p0 = d.params[k];
                d.params[k] = p0 + 1e-4;
                let lp = disc_step(&d, real, fake, mk, 0.5).unwrap().0;
                d.params[k] = p0 - 1e-4;
                let lm = disc_step(&d, real, fake, mk, 0.5).unwrap().0;
                d.params[k] = p0;
                let fd = (lp - lm) / 2e-4;
                worst_d = worst_d.max((fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-3));
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-5 && worst_d <= 1e-5 && secs < 120.0;
    verdict(
        2,
        "analytic vs central-difference gradients",
        pass,
        &format!(
            "{checked} parameters checked, {skipped} stencils across an |x| kink skipped, worst rel err generators {worst:.2e} discriminators {worst_d:.2e}, {secs:.1}s"
        ),
    );
    assert!(worst <= 1e-5 && worst_d <= 1e-5);
    assert!(secs < 120.0, "took {secs:.1}s");
}

// ------------------------------------------------------------ criterion 3

fn ulp(x: f64) -> f64 {
    let x = x.abs();
    f64::from_bits(x.to_bits() + 1) - x
}

#[test]
fn c03_mask_weight_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut sum_worst, mut bal_worst, mut pair_worst) = (0.0f64, 0.0f64, 0.0f64);
    let mut ok = true;
    for _ in 0..10_000 {
        let (w, h) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let plane = rand_mask(&mut rng, w, h);
        let mut n_fg = 0usize;
        for y in 0..h {
            for x in 0..w {
                n_fg += plane.get(x, y) as usize;
            }
        }
        let n_bg = w * h - n_fg;
        let mw = compute_mask_weights(&ActivationMask::new(plane)).unwrap();
        ok &= mw.n_fg == n_fg && mw.n_bg == n_bg;
        let s = mw.alpha + mw.beta;
        // both products against the correctly rounded N * N_bar / (N + N_bar)
        let q = (n_fg * n_bg) as f64 / (w * h) as f64;
        let (lhs, rhs) = (mw.alpha * n_fg as f64, mw.beta * n_bg as f64);
        let gap = |v: f64| if v == q { 0.0 } else { (v - q).abs() / ulp(q) };
        sum_worst = sum_worst.max((s - 1.0).abs() / ulp(1.0));
        bal_worst = bal_worst.max(gap(lhs).max(gap(rhs)));
        if lhs != rhs {
            pair_worst = pair_worst.max((lhs - rhs).abs() / ulp(lhs.max(rhs)));
        }
    }
    let pass = ok && sum_worst <= 1.0 && bal_worst <= 1.0;
    verdict(
        3,
        "alpha + beta = 1 and alpha N = beta N_bar",
        pass,
        &format!(
            "10000 masks, worst |a+b-1| {sum_worst} ulp, worst |aN - NN_bar/(N+N_bar)| {bal_worst} ulp (aN vs bN_bar directly: {pair_worst} ulp)"
        ),
    );
    assert!(pass);
}

// ------------------------------------------------------------ criterion 4

fn tiles_of(slide: &WsiImage, ts: usize, ov: f64, tint: impl Fn(usize, usize) -> f64) -> (Vec<GridTile>, vstain_core::wsi::TileGrid) {
    let grid = build_tile_grid(slide, &GridOptions::new(ts, ov, Magnification::X40)).unwrap();
    let tiles = grid
        .indices()
        .map(|(gx, gy)| {
            let (x, y) = grid.position(gx, gy).unwrap();
            let k = tint(gx, gy);
            let px = slide.base().crop_clamped(x as isize, y as isize, ts, ts).map(|v| v + k);
            GridTile { grid_x: gx, grid_y: gy, pixels: px }
        })
        .collect();
    (tiles, grid)
}

/// Squared differences of horizontally and vertically adjacent error values.
fn seam_energy(out: &Raster, truth: &Raster) -> f64 {
    let e = |x: usize, y: usize, c: usize| out.get(x, y, c) - truth.get(x, y, c);
    let mut s = 0.0;
    for y in 0..out.height() {
        for x in 0..out.width() {
            for c in 0..3 {
                if x + 1 < out.width() {
                    s += (e(x + 1, y, c) - e(x, y, c)).powi(2);
                }
                if y + 1 < out.height() {
                    s += (e(x, y + 1, c) - e(x, y, c)).powi(2);
                }
            }
        }
    }
    s
}

#[test]
fn c04_stitching_exactness() {
    let (w, h, ts) = (157, 113, 32);
    let constant = WsiImage::single(Raster::filled(w, h, 3, 0.37)).unwrap();
    let linear = WsiImage::single(Raster::from_fn(w, h, 3, |x, y, c| {
        0.1 + 0.7 * x as f64 / w as f64 + 0.15 * y as f64 / h as f64 + 0.02 * c as f64
    }))
    .unwrap();
    let mut recon: f64 = 0.0;
    for slide in [&constant, &linear] {
        for ov in [0.0, 0.3, 0.6] {
            let (tiles, grid) = tiles_of(slide, ts, ov, |_, _| 0.0);
            let out = stitch_wsi(tiles.into_iter().map(Ok), &grid, ov, 0.25, 16).unwrap();
            for (a, b) in out.base().data().iter().zip(slide.base().data()) {
                recon = recon.max((a - b).abs());
            }
        }
    }

    let mut ham: f64 = 0.0;
    for m in [2usize, 3, 17, 64, 512] {
        let win = hamming_2d(m).unwrap();
        let d = (m - 1) as f64;
        for y in 0..m {
            for x in 0..m {
                let want = (0.54 - 0.46 * (2.0 * PI * x as f64 / d).cos()) * (0.54 - 0.46 * (2.0 * PI * y as f64 / d).cos());
                ham = ham.max((win.plane.get(x, y, 0) - want).abs());
            }
        }
    }

    let smooth = WsiImage::single(Raster::from_fn(192, 160, 3, |x, y, c| {
        0.5 + 0.2 * ((x as f64 / 23.0).sin() * (y as f64 / 17.0).cos()) + 0.03 * c as f64
    }))
    .unwrap();
    let bias = |gx: usize, gy: usize| {
        let mut r = ChaCha8Rng::seed_from_u64((gx * 1000 + gy) as u64);
        if r.gen_bool(0.5) {
            0.05
        } else {
            -0.05
        }
    };
    let energy: Vec<f64> = [0.0, 0.3, 0.6]
        .iter()
        .map(|&ov| {
            let (tiles, grid) = tiles_of(&smooth, ts, ov, bias);
            let out = stitch_wsi(tiles.into_iter().map(Ok), &grid, ov, 0.25, 16).unwrap();
            seam_energy(out.base(), smooth.base())
        })
        .collect();
    let ratio = energy[2] / energy[0];
    let pass = recon <= 1e-6 && ham <= 1e-12 && ratio <= 0.5;
    verdict(
        4,
        "overlap-add stitching",
        pass,
        &format!(
            "reconstruction max err {recon:.2e}, window max err {ham:.2e}, seam energy 0/30/60% = {:.3}/{:.3}/{:.3} (ratio {ratio:.3})",
            energy[0], energy[1], energy[2]
        ),
    );
    assert!(recon <= 1e-6 && ham <= 1e-12);
    assert!(ratio <= 0.5);
}

// ------------------------------------------------------------ criterion 5

#[test]
fn c05_parameter_scaling() {
    let arch = ArchSpec::default();
    let report = count_parameters(8, &arch, true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bank = ModelBank::new(arch, 8, Init::default(), &mut rng);
    let size = |t: &ModelTriple| -> usize { Component::ALL.iter().map(|&c| t.params(c).unwrap().len()).sum() };
    let unified: usize = bank.triples.iter().map(size).sum();
    let pairwise: usize = (0..16).map(|_| size(&ModelTriple::init(&arch, Init::default(), &mut rng))).sum();
    let counted = unified as f64 / pairwise as f64;
    let paper = 230.0 / 409.0;
    let dev = (counted - 0.5623).abs() / 0.5623;
    let pass = report.unified_total == unified
        && report.pairwise_total == pairwise
        && (report.ratio - 9.0 / 16.0).abs() < 1e-15
        && (counted - 9.0 / 16.0).abs() < 1e-15
        && dev <= 0.01;
    verdict(
        5,
        "unified / pairwise parameter ratio",
        pass,
        &format!("{unified} / {pairwise} = {counted:.4} (reference {paper:.4}, deviation {:.2}%)", 100.0 * dev),
    );
    assert!(pass);
}

// ------------------------------------------------------- criteria 6 and 7

const TOY_SIZE: usize = 64;
const TOY_TILES: usize = 200;
const TOY_ITERS: usize = 2000;
const EVAL_SEEDS: std::ops::Range<u64> = 10_000..10_020;

struct Toy {
    specs: Vec<SynthStainSpec>,
    sets: Vec<PairSet>,
    scenes: Vec<Scene>,
}

fn toy() -> &'static Toy {
    static T: OnceLock<Toy> = OnceLock::new();
    T.get_or_init(|| {
        let specs = default_stain_specs(3).unwrap();
        let scenes: Vec<Scene> = (0..TOY_TILES as u64).map(|s| synth_scene(TOY_SIZE, TOY_SIZE, 3, s).unwrap()).collect();
        let sets = specs
            .iter()
            .map(|sp| {
                let tiles = scenes.iter().enumerate().map(|(i, sc)| render_stain(sc, sp, i as u64).0).collect();
                PairSet::new(&sp.stain_config(), scenes.iter().map(|s| s.he.clone()).collect(), tiles).unwrap()
            })
            .collect();
        Toy { specs, sets, scenes }
    })
}

fn toy_config(masking: bool) -> TrainingConfig {
    let mut cfg = TrainingConfig {
        num_stains: 3,
        batch_size: 1,
        base_lr: 5e-3,
        fixed_epochs: 10,
        decay_epochs: 10,
        iterations_per_epoch: 100,
        masking,
        init: Init::Identity,
        detailed_report: false,
        ..TrainingConfig::default()
    };
    cfg.loss_weights.lambda_cyc = 10.0;
    cfg.loss_weights.lambda_adv = 1.0;
    cfg
}

struct EvalSet {
    he: Vec<Raster>,
    truth: Vec<Vec<(Raster, ActivationMask)>>,
    fg: Vec<BitPlane>,
}

fn eval_set() -> &'static EvalSet {
    static E: OnceLock<EvalSet> = OnceLock::new();
    E.get_or_init(|| {
        let specs = &toy().specs;
        let scenes: Vec<Scene> = EVAL_SEEDS.map(|s| synth_scene(TOY_SIZE, TOY_SIZE, 3, s).unwrap()).collect();
        let rule = ForegroundRule::default();
        EvalSet {
            fg: scenes.iter().map(|s| rule.plane(&s.he)).collect(),
            truth: specs.iter().map(|sp| scenes.iter().zip(EVAL_SEEDS).map(|(s, seed)| render_stain(s, sp, seed)).collect()).collect(),
            he: scenes.into_iter().map(|s| s.he).collect(),
        }
    })
}

/// Per-stain foreground MSE and the activated-region MSE over all stains.
fn evaluate(predict: impl Fn(&Raster, usize) -> Raster) -> (Vec<f64>, f64) {
    let ev = eval_set();
    let mut per = Vec::new();
    let (mut act, mut n_act) = (0.0, 0);
    for (k, truth) in ev.truth.iter().enumerate() {
        let mut m = 0.0;
        for (i, (t, mask)) in truth.iter().enumerate() {
            let p = predict(&ev.he[i], k + 1);
            m += mse_foreground(&p, t, &ev.fg[i]).unwrap();
            if mask.plane.count_ones() > 0 {
                act += mse_foreground(&p, t, &mask.plane).unwrap();
                n_act += 1;
            }
        }
        per.push(m / truth.len() as f64);
    }
    (per, act / n_act as f64)
}

fn train_toy(masking: bool) -> ModelBank {
    let t = toy();
    let mut trainer = Trainer::new(toy_config(masking)).unwrap();
    for _ in 0..TOY_ITERS {
        let batch = sample_batch(&t.sets, 1, false, trainer.rng());
        trainer.train_iteration(&batch).unwrap();
    }
    trainer.bank
}

struct Trained {
    masked: ModelBank,
    unmasked: ModelBank,
    secs: f64,
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        toy();
        eval_set();
        let start = Instant::now();
        let (masked, unmasked) = rayon::join(|| train_toy(true), || train_toy(false));
        Trained { masked, unmasked, secs: start.elapsed().as_secs_f64() }
    })
}

/// Least-squares fit of the affine counterstain map on inactive pixels plus
/// the mean chromogen on active ones.
fn least_squares_oracle() -> Vec<([[f64; 4]; 3], [f64; 3])> {
    use nalgebra::{Matrix4, Vector4};
    let t = toy();
    t.sets
        .iter()
        .enumerate()
        .map(|(k, set)| {
            let act = 3 + k as u8;
            let mut ata = Matrix4::<f64>::zeros();
            let mut atb = [Vector4::<f64>::zeros(); 3];
            let (mut chrom, mut n) = ([0.0; 3], 0.0);
            for (sc, tile) in t.scenes.iter().zip(&set.tiles) {
                for (j, &l) in sc.labels.iter().enumerate() {
                    let (x, y) = (j % TOY_SIZE, j / TOY_SIZE);
                    let out = tile.pixel(x, y);
                    if l == act {
                        (0..3).for_each(|c| chrom[c] += out[c]);
                        n += 1.0;
                        continue;
                    }
                    let p = sc.he.pixel(x, y);
                    let v = Vector4::new(p[0], p[1], p[2], 1.0);
                    ata += v * v.transpose();
                    for c in 0..3 {
                        atb[c] += v * out[c];
                    }
                }
            }
            let inv = ata.try_inverse().expect("well-posed fit");
            let mut a = [[0.0; 4]; 3];
            for c in 0..3 {
                let sol = inv * atb[c];
                a[c] = [sol[0], sol[1], sol[2], sol[3]];
            }
            (a, chrom.map(|v| v / n))
        })
        .collect()
}

fn oracle_predict(fits: &[([[f64; 4]; 3], [f64; 3])], he: &Raster, stain: usize, active: &BitPlane) -> Raster {
    let (a, chrom) = &fits[stain - 1];
    Raster::from_fn(he.width(), he.height(), 3, |x, y, c| {
        if active.get(x, y) {
            chrom[c]
        } else {
            let p = he.pixel(x, y);
            (a[c][0] * p[0] + a[c][1] * p[1] + a[c][2] * p[2] + a[c][3]).clamp(0.0, 1.0)
        }
    })
}

#[test]
fn c06_toy_training() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let init = ModelBank::new(ArchSpec::default(), 3, Init::Identity, &mut rng);
    let (m0, _) = evaluate(|he, k| init.translate(he, k).unwrap());
    let base = m0.iter().sum::<f64>() / 3.0;

    let fits = least_squares_oracle();
    let ev = eval_set();
    let (mo, _) = evaluate(|he, k| {
        let i = ev.he.iter().position(|h| std::ptr::eq(h, he)).unwrap();
        oracle_predict(&fits, he, k, &ev.truth[k - 1][i].1.plane)
    });
    let feasible = mo.iter().sum::<f64>() / 3.0 / base;

    let tr = trained();
    let (mm, act_m) = evaluate(|he, k| tr.masked.translate(he, k).unwrap());
    let (_, act_u) = evaluate(|he, k| tr.unmasked.translate(he, k).unwrap());
    let ratio = mm.iter().sum::<f64>() / 3.0 / base;
    let per_ratio: Vec<String> = mm.iter().zip(&m0).map(|(a, b)| format!("{:.3}", a / b)).collect();
    let pass = feasible <= 0.1 && ratio <= 0.1 && act_m < act_u;
    verdict(
        6,
        "toy training",
        pass,
        &format!(
            "fg MSE ratio after {TOY_ITERS} iterations {ratio:.3} (per stain {}), least-squares oracle ratio {feasible:.4}, \
             activated MSE masked {act_m:.4} vs unmasked {act_u:.4}, two runs in {:.0}s on {} thread(s)",
            per_ratio.join(", "),
            tr.secs,
            rayon::current_num_threads()
        ),
    );
    assert!(feasible <= 0.1, "oracle ratio {feasible}");
    assert!(act_m < act_u, "masked {act_m} vs unmasked {act_u}");
    assert!(ratio <= 0.1, "foreground MSE ratio {ratio:.3}");
}

#[test]
fn c07_qc_anomaly_detection() {
    let t = toy();
    let bank = &trained().masked;
    let mut intervals = Vec::new();
    for k in 1..=3 {
        let d = bank.discriminator(Domain::Stain(k)).unwrap();
        let maps: Vec<_> = t.scenes[..64].iter().map(|s| confidence_map(d, &bank.translate(&s.he, k).unwrap()).unwrap()).collect();
        intervals.push(calibrate_interval(&maps, 5.0, 95.0).unwrap());
    }
    let score = |tile: &Raster, k: usize| {
        let d = bank.discriminator(Domain::Stain(k)).unwrap();
        anomaly_stats(&confidence_map(d, tile).unwrap(), intervals[k - 1])
    };
    // 100 clean and 100 degraded generated tiles from held-out scenes
    let held: Vec<Raster> = (20_000..20_200u64).map(|s| synth_scene(TOY_SIZE, TOY_SIZE, 3, s).unwrap().he).collect();
    let source = |i: usize| &held[i];
    let (mut clean, mut bad) = (Vec::new(), Vec::new());
    for i in 0..100 {
        let k = 1 + i % 3;
        let out = bank.translate(source(i), k).unwrap();
        clean.push(score(&out, k).score());
        let j = 100 + i;
        let k = 1 + j % 3;
        let out = bank.translate(source(j), k).unwrap();
        let bad_tile = degrade_tile(&out, DefectKind::ALL[i % 3], 0.5, j as u64).unwrap();
        bad.push(score(&bad_tile, k).score());
    }
    let auc = roc_auc(&bad, &clean).unwrap();
    let per_kind: Vec<String> = DefectKind::ALL
        .iter()
        .enumerate()
        .map(|(q, kind)| {
            let pos: Vec<f64> = bad.iter().skip(q).step_by(3).copied().collect();
            format!("{kind:?} {:.3}", roc_auc(&pos, &clean).unwrap())
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut low = 0;
    for i in 0..200 {
        let rgb = [rng.gen_range(0.9..1.0), rng.gen_range(0.9..1.0), rng.gen_range(0.9..1.0)];
        if score(&Raster::solid(TOY_SIZE, TOY_SIZE, rgb), 1 + i % 3).verdict == Verdict::OutlierLow {
            low += 1;
        }
    }
    let frac = low as f64 / 200.0;
    let pass = auc >= 0.9 && frac >= 0.95;
    verdict(
        7,
        "discriminator QC",
        pass,
        &format!("AUC {auc:.3} ({}), background flagged low {:.1}%", per_kind.join(", "), 100.0 * frac),
    );
    assert!(frac >= 0.95, "background outlier_low fraction {frac}");
    assert!(auc >= 0.9, "AUC {auc:.3}");
}

// ------------------------------------------------------------ criterion 8

#[test]
fn c08_update_isolation() {
    let specs = default_stain_specs(3).unwrap();
    let scenes: Vec<Scene> = (0..12u64).map(|s| synth_scene(64, 64, 3, 500 + s).unwrap()).collect();
    let sets: Vec<PairSet> = specs
        .iter()
        .map(|sp| {
            let he = scenes.iter().map(|s| s.he.crop_clamped(0, 0, 16, 16)).collect();
            let tiles = scenes.iter().enumerate().map(|(i, sc)| render_stain(sc, sp, i as u64).0.crop_clamped(0, 0, 16, 16)).collect();
            PairSet::new(&sp.stain_config(), he, tiles).unwrap()
        })
        .collect();
    let mut cfg = toy_config(true);
    cfg.loss_weights.lambda_idt = 1.0;
    cfg.loss_weights.lambda_lat = 1.0;
    cfg.loss_weights.lambda_fwd = 1.0;
    let mut tr = Trainer::new(cfg).unwrap();
    let keys: Vec<(Domain, Component)> = (0..=3).flat_map(|i| Component::ALL.map(|c| (Domain::from_index(i), c))).collect();
    let snap = |b: &ModelBank| -> Vec<(u64, Vec<f64>)> {
        keys.iter().map(|&(d, c)| (b.checksum(d, c).unwrap(), b.triple(d).unwrap().params(c).unwrap().to_vec())).collect()
    };
    let mut prev = snap(&tr.bank);
    let mut violations = Vec::new();
    let mut phases = 0;
    for it in 0..100 {
        let batch = sample_batch(&sets, 1, false, tr.rng());
        let mut obs = |phase: Phase, b: &ModelBank| {
            let now = snap(b);
            let expect = |d: Domain, c: Component| match phase {
                Phase::Stain(k) => d == Domain::He || d == Domain::Stain(k),
                Phase::HeRegularization => d == Domain::He && c != Component::Discriminator,
            };
            for (j, &(d, c)) in keys.iter().enumerate() {
                let by_sum = now[j].0 != prev[j].0;
                let by_value = now[j].1 != prev[j].1;
                if by_sum != by_value || by_sum != expect(d, c) {
                    violations.push(format!("iteration {it} {phase:?}: {d:?} {} changed={by_sum}", c.name()));
                }
            }
            prev = now;
            phases += 1;
        };
        tr.train_iteration_observed(&batch, &mut obs).unwrap();
    }
    let pass = violations.is_empty() && phases == 400;
    verdict(
        8,
        "update isolation",
        pass,
        &format!("100 iterations, {phases} phases observed, {} violations", violations.len()),
    );
    assert!(pass, "{:?}", &violations[..violations.len().min(5)]);
}

// ------------------------------------------------------------ criterion 9

/// Mean windowed SSIM by direct summation over every 11x11 window.
fn o_ssim(a: &Raster, b: &Raster) -> f64 {
    let lum = |r: &Raster, x: usize, y: usize| (0..3).map(|c| LUMA[c] * r.get(x, y, c)).sum::<f64>();
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let gs: f64 = g.iter().sum();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (ow, oh) = (a.width() - 10, a.height() - 10);
    let mut total = 0.0;
    for y0 in 0..oh {
        for x0 in 0..ow {
            let wt = |i: usize, j: usize| g[i] * g[j] / (gs * gs);
            let (mut mx, mut my) = (0.0, 0.0);
            for j in 0..11 {
                for i in 0..11 {
                    mx += wt(i, j) * lum(a, x0 + i, y0 + j);
                    my += wt(i, j) * lum(b, x0 + i, y0 + j);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for j in 0..11 {
                for i in 0..11 {
                    let dx = lum(a, x0 + i, y0 + j) - mx;
                    let dy = lum(b, x0 + i, y0 + j) - my;
                    vx += wt(i, j) * dx * dx;
                    vy += wt(i, j) * dy * dy;
                    cxy += wt(i, j) * dx * dy;
                }
            }
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    100.0 * total / (ow * oh) as f64
}

#[test]
fn c09_metric_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let truth = rand_raster(&mut rng, 48, 40, 3, 0.0, 0.9);
    let fg = BitPlane::ones(48, 40);
    let mse_id = mse_foreground(&truth, &truth, &fg).unwrap();
    let (psnr_id, ssim_id) = (psnr(mse_id).unwrap(), ssim(&truth, &truth).unwrap());
    let shifted = truth.map(|v| v + 0.1);
    let mse_off = mse_foreground(&shifted, &truth, &fg).unwrap();
    let psnr_off = psnr(mse_off).unwrap();
    let ident = mse_id == 0.0 && psnr_id == 100.0 && (ssim_id - 100.0).abs() <= 1e-9;
    let offset = rel_err(mse_off, 1e-2) <= 1e-12 && (psnr_off - 20.0).abs() <= 1e-9;

    let mut worst: f64 = 0.0;
    for s in 0..10 {
        let (w, h) = (rng.gen_range(11..=40), rng.gen_range(11..=40));
        let a = if s % 2 == 0 {
            rand_raster(&mut rng, w, h, 3, 0.0, 1.0)
        } else {
            let (fx, fy) = (rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5));
            Raster::from_fn(w, h, 3, |x, y, c| 0.5 + 0.4 * ((x as f64 * fx).sin() * (y as f64 * fy + c as f64).cos()))
        };
        let b = match s % 3 {
            0 => a.map(|v| 1.0 - v),
            1 => a.zip_map(&rand_raster(&mut rng, w, h, 3, -0.2, 0.2), |v, n| (v + n).clamp(0.0, 1.0)).unwrap(),
            _ => rand_raster(&mut rng, w, h, 3, 0.0, 1.0),
        };
        worst = worst.max((ssim(&a, &b).unwrap() - o_ssim(&a, &b)).abs());
    }
    let pass = ident && offset && worst <= 1e-9;
    verdict(
        9,
        "metric fixtures",
        pass,
        &format!(
            "identical: MSE {mse_id}, PSNR {psnr_id} dB, SSIM {ssim_id:.12}%; offset 0.1: MSE {mse_off:.15}, PSNR {psnr_off:.12} dB; \
             SSIM vs windowed oracle worst abs diff {worst:.2e} (percent)"
        ),
    );
    assert!(pass);
}

// ----------------------------------------------------------- criterion 10

#[test]
fn c10_selective_loading() {
    let dir = tempfile::tempdir().unwrap();
    let specs = default_stain_specs(8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let bank = ModelBank::new(ArchSpec::default(), 8, Init::default(), &mut rng);
    let manifest = Manifest {
        version: checkpoint::FORMAT_VERSION,
        num_stains: 8,
        arch: bank.arch,
        iteration: 0,
        stains: specs.iter().map(|s| s.stain_config()).collect(),
        qc_interval: None,
    };
    checkpoint::save(dir.path(), &bank, &manifest).unwrap();
    let on_disk = std::fs::read_dir(dir.path()).unwrap().count();

    let wanted = [manifest.stain_id("cd8").unwrap(), manifest.stain_id("cd68").unwrap()];
    let mut log = AccessLog::default();
    let (_, loaded) = checkpoint::load_for_staining(dir.path(), &wanted, false, &mut log).unwrap();
    let mut names: Vec<String> = log
        .opened
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .filter(|n| n != checkpoint::MANIFEST)
        .collect();
    names.sort();
    let expected = vec!["he_encoder.json".to_string(), "stain2_generator.json".into(), "stain4_generator.json".into()];
    let x = rand_raster(&mut rng, 8, 8, 3, 0.0, 1.0);
    let usable = wanted.iter().all(|&k| loaded.translate(&x, k).unwrap() == bank.translate(&x, k).unwrap());
    let others_absent = (1..=8).filter(|k| !wanted.contains(k)).all(|k| loaded.translate(&x, k).is_err());
    let pass = log.generator_side() == 3 && log.discriminators() == 0 && names == expected && usable && others_absent;
    verdict(
        10,
        "selective checkpoint loading",
        pass,
        &format!(
            "2 of 8 stains: {} generator-side files opened ({}), {} discriminators, {on_disk} files on disk",
            log.generator_side(),
            names.join(", "),
            log.discriminators()
        ),
    );
    assert!(pass);
}
