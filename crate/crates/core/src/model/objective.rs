//! Per-stain generator objective and discriminator losses.
//!
//! Two routes compute the same numbers: [`generator_report`] composes the
//! plain loss kernels, while [`generator_step`] fuses value and gradient and
//! back-propagates through both cycles by hand.

use serde::{Deserialize, Serialize};

use super::{he_cycle_forward, stain_cycle_forward, Discriminator, Domain, ModelBank, Network};
use crate::error::{Error, Result};
use crate::loss::grad::{l1_terms, sq_terms};
use crate::loss::{self, AdvForm, Branch, CyclePack, LossReport, LossWeights, TermParts};
use crate::raster::Raster;
use crate::stain_mask::{resize_mask, ActivationMask, DegradeSpec, MaskWeights};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub paired: bool,
    pub adv_form: AdvForm,
    pub degrade: DegradeSpec,
    /// Weight of the supervised term in paired mode.
    pub sup_weight: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            paired: false,
            adv_form: AdvForm::Literal,
            degrade: DegradeSpec::default(),
            sup_weight: 1.0,
        }
    }
}

impl ObjectiveConfig {
    fn reg_scale(&self, lambda: f64) -> f64 {
        self.weights.lambda_reg * lambda
    }
}

/// Parameter gradients of the four generator-side components of one stain.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorGrads {
    pub e_he: Vec<f64>,
    pub g_he: Vec<f64>,
    pub e_i: Vec<f64>,
    pub g_i: Vec<f64>,
}

impl GeneratorGrads {
    pub fn zeros(bank: &ModelBank) -> Self {
        let arch = &bank.arch;
        let ne = super::network::stack_param_count(&arch.encoder_layers());
        let ng = super::network::stack_param_count(&arch.generator_layers());
        Self {
            e_he: vec![0.0; ne],
            g_he: vec![0.0; ng],
            e_i: vec![0.0; ne],
            g_i: vec![0.0; ng],
        }
    }

    pub fn add(&mut self, o: &GeneratorGrads) {
        for (a, b) in [
            (&mut self.e_he, &o.e_he),
            (&mut self.g_he, &o.g_he),
            (&mut self.e_i, &o.e_i),
            (&mut self.g_i, &o.g_i),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in [&mut self.e_he, &mut self.g_he, &mut self.e_i, &mut self.g_i] {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Unweighted loss terms of one generator pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TermValues {
    pub cyc: f64,
    pub adv: f64,
    pub sup: f64,
    pub idt: f64,
    pub lat: f64,
    pub fwd: f64,
}

impl TermValues {
    pub fn add(&mut self, o: &TermValues) {
        self.cyc += o.cyc;
        self.adv += o.adv;
        self.sup += o.sup;
        self.idt += o.idt;
        self.lat += o.lat;
        self.fwd += o.fwd;
    }

    pub fn scale(&mut self, k: f64) {
        for v in [&mut self.cyc, &mut self.adv, &mut self.sup, &mut self.idt, &mut self.lat, &mut self.fwd] {
            *v *= k;
        }
    }
}

/// Output of the fused generator pass on one tile pair.
#[derive(Clone, Debug)]
pub struct GeneratorStep {
    pub value: f64,
    /// Synthesis loss alone (without the supervised term).
    pub ihc_value: f64,
    pub terms: TermValues,
    pub grads: GeneratorGrads,
    /// `(E_he, G_he)` gradients of the synthesis loss alone.
    pub ihc_he_grads: (Vec<f64>, Vec<f64>),
    pub y_hat_i: Raster,
    pub y_hat_he: Raster,
}

fn zeros_like(r: &Raster) -> Raster {
    Raster::zeros(r.width(), r.height(), r.channels())
}

fn score_mask(mask: &ActivationMask, s: &Raster) -> ActivationMask {
    resize_mask(mask, s.width(), s.height())
}

fn avg_parts(a: TermParts, b: TermParts) -> TermParts {
    TermParts {
        plain: 0.5 * (a.plain + b.plain),
        masked: 0.5 * (a.masked + b.masked),
        complement: 0.5 * (a.complement + b.complement),
    }
}

fn check_inputs(x_he: &Raster, x_i: &Raster, mask: &ActivationMask) -> Result<()> {
    x_he.check_same_dims(x_i, "tile pair")?;
    if mask.width() != x_i.width() || mask.height() != x_i.height() {
        return Err(Error::Shape("mask does not match the stain tile".into()));
    }
    Ok(())
}

/// Loss report of stain `stain` on one tile pair, built from the plain
/// kernels. Terms whose effective weight is zero are skipped and reported
/// as 0. The discriminator entries use the current discriminators on the
/// same generated tiles.
pub fn generator_report(
    bank: &ModelBank,
    x_he: &Raster,
    x_i: &Raster,
    stain: usize,
    mask: &ActivationMask,
    mw: &MaskWeights,
    cfg: &ObjectiveConfig,
) -> Result<LossReport> {
    check_inputs(x_he, x_i, mask)?;
    let si = Domain::Stain(stain);
    let he = he_cycle_forward(bank, x_he, stain)?;
    let st = stain_cycle_forward(bank, x_i, stain)?;
    let pack = CyclePack {
        stain,
        he,
        st,
        mask: Some(mask.clone()),
        weights: Some(*mw),
        paired: cfg.paired,
    };
    let w = &cfg.weights;

    let cyc_parts = if cfg.paired {
        loss::cycle_terms_paired(&pack)?
    } else {
        loss::cycle_terms_unpaired(&pack)?
    };

    let d_i = bank.discriminator(si)?;
    let d_he = bank.discriminator(Domain::He)?;
    let fake_i = d_i.forward(&pack.he.y_hat_i)?;
    let fake_he = d_he.forward(&pack.st.y_hat_he)?;
    let head = |a: &Raster, b: &Raster| -> Result<TermParts> {
        let m = score_mask(mask, b);
        if cfg.paired {
            loss::adv_terms_paired(a, b, &m, cfg.adv_form)
        } else {
            loss::adv_terms_unpaired(a, b, &m, cfg.adv_form)
        }
    };
    let adv_parts = avg_parts(head(&fake_i.lum, &fake_he.lum)?, head(&fake_i.rgb, &fake_he.rgb)?);

    let sup_parts = if cfg.paired {
        loss::supervised_terms(&pack)?
    } else {
        TermParts::default()
    };

    let mut idt = 0.0;
    if cfg.reg_scale(w.lambda_idt) != 0.0 {
        let a_i = bank.generator(si)?.forward(&pack.st.z_i)?;
        let a_he = bank.generator(Domain::He)?.forward(&pack.he.z_he)?;
        idt = loss::identity_loss(Branch::Stain, x_i, &a_i, Some(mask), Some(mw))?
            + loss::identity_loss(Branch::He, x_he, &a_he, None, None)?;
    }
    let mut lat = 0.0;
    if cfg.reg_scale(w.lambda_lat) != 0.0 {
        let zm = resize_mask(mask, pack.st.z_i.width(), pack.st.z_i.height());
        lat = loss::latent_loss(Branch::Stain, &pack.st.z_i, &pack.st.z_hat_i, Some(&zm), Some(mw))?
            + loss::latent_loss(Branch::He, &pack.he.z_he, &pack.he.z_hat_he, None, None)?;
    }
    let mut fwd = 0.0;
    if cfg.reg_scale(w.lambda_fwd) != 0.0 {
        fwd = loss::forward_loss(Branch::Stain, x_i, &pack.st.y_hat_he, Some(mask), Some(mw), &cfg.degrade)?
            + loss::forward_loss(Branch::He, x_he, &pack.he.y_hat_i, None, None, &cfg.degrade)?;
    }

    let cyc = cyc_parts.total(mw);
    let adv = adv_parts.total(mw);
    let sup = sup_parts.total(mw);
    let reg = loss::reg_loss(idt, lat, fwd, w);
    let ihc_total = loss::synthesis_loss(cyc, adv, reg, w);
    let objective = if cfg.paired { ihc_total + cfg.sup_weight * sup } else { ihc_total };

    let real_i = d_i.forward(x_i)?;
    let real_he = d_he.forward(x_he)?;
    let disc_stain = 0.5
        * (loss::disc_loss_stain(&real_i.lum, &fake_i.lum, &score_mask(mask, &real_i.lum), mw, w.lambda_d)?
            + loss::disc_loss_stain(&real_i.rgb, &fake_i.rgb, &score_mask(mask, &real_i.rgb), mw, w.lambda_d)?);
    let disc_he = 0.5
        * (loss::disc_loss_he(&real_he.lum, &fake_he.lum, w.lambda_d)?
            + loss::disc_loss_he(&real_he.rgb, &fake_he.rgb, w.lambda_d)?);

    Ok(LossReport {
        iteration: 0,
        stain,
        cyc,
        adv,
        sup,
        idt,
        lat,
        fwd,
        reg,
        ihc_total,
        objective,
        disc_stain,
        disc_he,
        cyc_parts,
        adv_parts,
        sup_parts,
        alpha: mw.alpha,
        beta: mw.beta,
    })
}

/// Fused value and exact gradient of the per-stain generator objective with
/// respect to `E_he`, `G_he`, `E_i` and `G_i`. Discriminators are held fixed.
pub fn generator_step(
    bank: &ModelBank,
    x_he: &Raster,
    x_i: &Raster,
    stain: usize,
    mask: &ActivationMask,
    mw: &MaskWeights,
    cfg: &ObjectiveConfig,
) -> Result<GeneratorStep> {
    check_inputs(x_he, x_i, mask)?;
    let si = Domain::Stain(stain);
    let e_he = bank.encoder(Domain::He)?;
    let g_he = bank.generator(Domain::He)?;
    let e_i = bank.encoder(si)?;
    let g_i = bank.generator(si)?;
    let d_he = bank.discriminator(Domain::He)?;
    let d_i = bank.discriminator(si)?;
    let w = &cfg.weights;
    let (al, be) = (mw.alpha, mw.beta);
    let plane = Some(&mask.plane);

    let (z_he, c1) = e_he.forward_cached(x_he)?;
    let (y_i, c2) = g_i.forward_cached(&z_he)?;
    let (zh_he, c3) = e_i.forward_cached(&y_i)?;
    let (xh_he, c4) = g_he.forward_cached(&zh_he)?;
    let (z_i, c5) = e_i.forward_cached(x_i)?;
    let (y_he, c6) = g_he.forward_cached(&z_i)?;
    let (zh_i, c7) = e_he.forward_cached(&y_he)?;
    let (xh_i, c8) = g_i.forward_cached(&zh_i)?;

    let mut gr = GeneratorGrads::zeros(bank);
    let mut d_y_i = zeros_like(&y_i);
    let mut d_y_he = zeros_like(&y_he);
    let mut d_z_he = zeros_like(&z_he);
    let mut d_z_i = zeros_like(&z_i);
    let mut d_zh_he = zeros_like(&zh_he);
    let mut d_zh_i = zeros_like(&zh_i);
    let mut d_xh_he = zeros_like(&xh_he);
    let mut d_xh_i = zeros_like(&xh_i);
    let mut t = TermValues::default();

    // cycle
    let lc = w.lambda_cyc;
    t.cyc += l1_terms(&xh_i, x_i, plane, al, be, lc, Some(&mut d_xh_i), None);
    let he_mask = if cfg.paired { plane } else { None };
    t.cyc += l1_terms(&xh_he, x_he, he_mask, al, be, lc, Some(&mut d_xh_he), None);

    // adversarial, averaged over the two heads
    let la = 0.5 * w.lambda_adv;
    let sym = if cfg.adv_form == AdvForm::Symmetric { 1.0 } else { 0.0 };
    let (plain_i, masked_i, plain_he) = if cfg.paired { (sym, true, 1.0) } else { (1.0, false, sym) };
    let (s_i, dc_i) = d_i.forward_cached(&y_i)?;
    let (s_he, dc_he) = d_he.forward_cached(&y_he)?;
    let adv_head = |s: &Raster, c_plain: f64, masked: bool, g: &mut Raster| -> f64 {
        if masked {
            let m = score_mask(mask, s);
            sq_terms(s, 1.0, Some(&m.plane), c_plain, al, be, la, Some(g))
        } else {
            sq_terms(s, 1.0, None, c_plain, 0.0, 0.0, la, Some(g))
        }
    };
    let mut g_si = (zeros_like(&s_i.lum), zeros_like(&s_i.rgb));
    let mut g_she = (zeros_like(&s_he.lum), zeros_like(&s_he.rgb));
    let adv_sum = adv_head(&s_i.lum, plain_i, masked_i, &mut g_si.0)
        + adv_head(&s_i.rgb, plain_i, masked_i, &mut g_si.1)
        + adv_head(&s_he.lum, plain_he, true, &mut g_she.0)
        + adv_head(&s_he.rgb, plain_he, true, &mut g_she.1);
    t.adv = 0.5 * adv_sum;
    d_y_i.add_assign(&d_i.backward(&dc_i, &g_si.0, &g_si.1, None));
    d_y_he.add_assign(&d_he.backward(&dc_he, &g_she.0, &g_she.1, None));

    // regularizers
    let s = cfg.reg_scale(w.lambda_idt);
    if s != 0.0 {
        let (a_i, ca_i) = g_i.forward_cached(&z_i)?;
        let mut d_a = zeros_like(&a_i);
        t.idt += l1_terms(&a_i, x_i, plane, al, be, s, Some(&mut d_a), None);
        d_z_i.add_assign(&g_i.backward(&ca_i, &d_a, &mut gr.g_i));
        let (a_he, ca_he) = g_he.forward_cached(&z_he)?;
        let mut d_a = zeros_like(&a_he);
        t.idt += l1_terms(&a_he, x_he, None, al, be, s, Some(&mut d_a), None);
        d_z_he.add_assign(&g_he.backward(&ca_he, &d_a, &mut gr.g_he));
    }
    let s = cfg.reg_scale(w.lambda_lat);
    if s != 0.0 {
        t.lat += l1_terms(&zh_i, &z_i, plane, al, be, s, Some(&mut d_zh_i), Some(&mut d_z_i));
        t.lat += l1_terms(&zh_he, &z_he, None, al, be, s, Some(&mut d_zh_he), Some(&mut d_z_he));
    }
    let s = cfg.reg_scale(w.lambda_fwd);
    if s != 0.0 {
        let dg = &cfg.degrade;
        let xs = dg.apply(x_i);
        let ys = dg.apply(&y_he);
        let ms = dg.apply_mask(mask);
        let mut d_ys = zeros_like(&ys);
        t.fwd += l1_terms(&ys, &xs, Some(&ms.plane), al, be, s, Some(&mut d_ys), None);
        d_y_he.add_assign(&dg.adjoint(&d_ys, y_he.width(), y_he.height(), y_he.channels()));
        let xs = dg.apply(x_he);
        let ys = dg.apply(&y_i);
        let mut d_ys = zeros_like(&ys);
        t.fwd += l1_terms(&ys, &xs, None, al, be, s, Some(&mut d_ys), None);
        d_y_i.add_assign(&dg.adjoint(&d_ys, y_i.width(), y_i.height(), y_i.channels()));
    }

    // back through the H&E cycle
    d_zh_he.add_assign(&g_he.backward(&c4, &d_xh_he, &mut gr.g_he));
    d_y_i.add_assign(&e_i.backward(&c3, &d_zh_he, &mut gr.e_i));
    d_z_he.add_assign(&g_i.backward(&c2, &d_y_i, &mut gr.g_i));
    e_he.backward(&c1, &d_z_he, &mut gr.e_he);
    // and the stain cycle
    d_zh_i.add_assign(&g_i.backward(&c8, &d_xh_i, &mut gr.g_i));
    d_y_he.add_assign(&e_he.backward(&c7, &d_zh_i, &mut gr.e_he));
    d_z_i.add_assign(&g_he.backward(&c6, &d_y_he, &mut gr.g_he));
    e_i.backward(&c5, &d_z_i, &mut gr.e_i);

    let reg = loss::reg_loss(t.idt, t.lat, t.fwd, w);
    let ihc = loss::synthesis_loss(t.cyc, t.adv, reg, w);
    let ihc_he_grads = (gr.e_he.clone(), gr.g_he.clone());
    let mut value = ihc;
    if cfg.paired && cfg.sup_weight != 0.0 {
        let sw = cfg.sup_weight;
        let mut sd_y_i = zeros_like(&y_i);
        let mut sd_y_he = zeros_like(&y_he);
        t.sup = l1_terms(&y_i, x_i, plane, al, be, sw, Some(&mut sd_y_i), None)
            + l1_terms(&y_he, x_he, plane, al, be, sw, Some(&mut sd_y_he), None);
        value += sw * t.sup;
        let dz = g_i.backward(&c2, &sd_y_i, &mut gr.g_i);
        e_he.backward(&c1, &dz, &mut gr.e_he);
        let dz = g_he.backward(&c6, &sd_y_he, &mut gr.g_he);
        e_i.backward(&c5, &dz, &mut gr.e_i);
    }

    Ok(GeneratorStep {
        value,
        ihc_value: ihc,
        terms: t,
        grads: gr,
        ihc_he_grads,
        y_hat_i: y_i,
        y_hat_he: y_he,
    })
}

/// Discriminator loss and parameter gradient, averaged over both heads.
/// With a mask, the real side carries the stain mask terms; without one
/// the loss is the plain H&E form.
pub fn disc_step(
    d: &Discriminator,
    real: &Raster,
    fake: &Raster,
    mask: Option<(&ActivationMask, &MaskWeights)>,
    lambda_d: f64,
) -> Result<(f64, Vec<f64>)> {
    let (sr, cr) = d.forward_cached(real)?;
    let (sf, cf) = d.forward_cached(fake)?;
    let scale = 0.5 * lambda_d;
    let mut grad = vec![0.0; d.param_count()];
    let mut total = 0.0;
    let real_head = |s: &Raster, g: &mut Raster| -> f64 {
        match mask {
            Some((m, w)) => {
                let m = score_mask(m, s);
                sq_terms(s, 1.0, Some(&m.plane), 1.0, w.alpha, w.beta, scale, Some(g))
            }
            None => sq_terms(s, 1.0, None, 1.0, 0.0, 0.0, scale, Some(g)),
        }
    };
    let mut gl = zeros_like(&sr.lum);
    let mut gc = zeros_like(&sr.rgb);
    total += real_head(&sr.lum, &mut gl) + real_head(&sr.rgb, &mut gc);
    d.backward(&cr, &gl, &gc, Some(&mut grad));
    let mut gl = zeros_like(&sf.lum);
    let mut gc = zeros_like(&sf.rgb);
    total += sq_terms(&sf.lum, 0.0, None, 1.0, 0.0, 0.0, scale, Some(&mut gl))
        + sq_terms(&sf.rgb, 0.0, None, 1.0, 0.0, 0.0, scale, Some(&mut gc));
    d.backward(&cf, &gl, &gc, Some(&mut grad));
    Ok((scale * total, grad))
}

/// Scalar probes for checking reverse-mode gradients of a single network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Probe {
    /// `|p|^2 / 2` over the parameter vector itself.
    HalfSquaredNorm,
    /// Mean absolute error of the output against a constant.
    MaeTo(f64),
}

/// Value and parameter gradient of `probe` for `net` on input `x`. An MAE
/// residual of exactly zero sits on the kink and is a contract error.
pub fn analytic_gradient(net: &Network, x: &Raster, probe: Probe) -> Result<(f64, Vec<f64>)> {
    match probe {
        Probe::HalfSquaredNorm => {
            let v = net.params.iter().map(|p| p * p).sum::<f64>() / 2.0;
            Ok((v, net.params.clone()))
        }
        Probe::MaeTo(t) => {
            let (y, cache) = net.forward_cached(x)?;
            if let Some(i) = y.data().iter().position(|&v| v == t) {
                return Err(Error::Contract(format!("MAE residual {i} is exactly zero")));
            }
            let target = Raster::filled(y.width(), y.height(), y.channels(), t);
            let mut dy = zeros_like(&y);
            let v = l1_terms(&y, &target, None, 0.0, 0.0, 1.0, Some(&mut dy), None);
            let mut g = vec![0.0; net.param_count()];
            net.backward(&cache, &dy, &mut g);
            Ok((v, g))
        }
    }
}
