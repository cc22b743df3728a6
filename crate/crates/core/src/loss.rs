//! Loss kernels for the dual-cycle objective.
//!
//! Every kernel here is a pure value function built from two base
//! distances: mean absolute error for reconstruction-type comparisons and
//! mean squared error against a constant target for adversarial scores.
//! Masked variants multiply both operands by the binary mask first and then
//! average over the *full* raster, not over the mask support.
//!
//! [`grad`] holds fused value-and-gradient versions used by the trainer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BitPlane, Raster};
use crate::stain_mask::{ActivationMask, DegradeSpec, MaskWeights};

/// All loss coefficients. `lambda_reg` gates the stain regularizers as a group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cyc: f64,
    pub lambda_adv: f64,
    pub lambda_reg: f64,
    pub lambda_d: f64,
    pub lambda_idt: f64,
    pub lambda_lat: f64,
    pub lambda_fwd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cyc: 10.0,
            lambda_adv: 1.0,
            lambda_reg: 1.0,
            lambda_d: 0.5,
            lambda_idt: 0.0,
            lambda_lat: 0.0,
            lambda_fwd: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_adv", self.lambda_adv),
            ("lambda_reg", self.lambda_reg),
            ("lambda_d", self.lambda_d),
            ("lambda_idt", self.lambda_idt),
            ("lambda_lat", self.lambda_lat),
            ("lambda_fwd", self.lambda_fwd),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn regularizers_active(&self) -> bool {
        self.lambda_reg > 0.0 && (self.lambda_idt > 0.0 || self.lambda_lat > 0.0 || self.lambda_fwd > 0.0)
    }
}

/// Which side of the dual cycle a regularizer branch belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    He,
    Stain,
}

/// `Literal` keeps the asymmetric adversarial forms (one unmasked term);
/// `Symmetric` adds the unmasked term for the other discriminator too.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvForm {
    #[default]
    Literal,
    Symmetric,
}

/// Tiles and intermediates of the H&E cycle: `X_he -> Y_i -> X_he`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeCycle {
    pub x_he: Raster,
    pub z_he: Raster,
    pub y_hat_i: Raster,
    pub z_hat_he: Raster,
    pub x_hat_he: Raster,
}

/// Tiles and intermediates of the stain cycle: `X_i -> Y_he -> X_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct StainCycle {
    pub x_i: Raster,
    pub z_i: Raster,
    pub y_hat_he: Raster,
    pub z_hat_i: Raster,
    pub x_hat_i: Raster,
}

/// Both cycles for one stain plus the stain tile's activation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct CyclePack {
    pub stain: usize,
    pub he: HeCycle,
    pub st: StainCycle,
    pub mask: Option<ActivationMask>,
    pub weights: Option<MaskWeights>,
    /// Whether `x_he` and `x_i` are aligned sections.
    pub paired: bool,
}

impl CyclePack {
    fn mask_and_weights(&self) -> Result<(&ActivationMask, &MaskWeights)> {
        match (&self.mask, &self.weights) {
            (Some(m), Some(w)) => Ok((m, w)),
            _ => Err(Error::Contract(format!(
                "stain {}: cycle pack without activation mask/weights",
                self.stain
            ))),
        }
    }
}

/// Unmasked, mask and complement contributions of one kernel (before the
/// alpha/beta weighting).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermParts {
    pub plain: f64,
    pub masked: f64,
    pub complement: f64,
}

impl TermParts {
    pub fn total(&self, w: &MaskWeights) -> f64 {
        self.plain + w.alpha * self.masked + w.beta * self.complement
    }
}

/// One record of the training log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    pub stain: usize,
    pub cyc: f64,
    pub adv: f64,
    pub sup: f64,
    pub idt: f64,
    pub lat: f64,
    pub fwd: f64,
    pub reg: f64,
    pub ihc_total: f64,
    /// Generator objective actually minimized (`ihc_total + sup` when paired).
    pub objective: f64,
    pub disc_stain: f64,
    pub disc_he: f64,
    pub cyc_parts: TermParts,
    pub adv_parts: TermParts,
    pub sup_parts: TermParts,
    pub alpha: f64,
    pub beta: f64,
}

fn check_mask(mask: &BitPlane, r: &Raster, what: &str) -> Result<()> {
    if mask.width() != r.width() || mask.height() != r.height() {
        return Err(Error::Shape(format!(
            "{what}: mask {}x{} vs raster {}x{}",
            mask.width(),
            mask.height(),
            r.width(),
            r.height()
        )));
    }
    Ok(())
}

/// Mean of `|m*a - m*b|` over every element; `None` means an all-ones mask.
pub fn masked_distance(a: &Raster, b: &Raster, mask: Option<&ActivationMask>) -> Result<f64> {
    a.check_same_dims(b, "masked_distance")?;
    if a.is_empty() {
        return Err(Error::Shape("masked_distance on empty raster".into()));
    }
    let ch = a.channels();
    let sum: f64 = match mask {
        None => a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum(),
        Some(m) => {
            check_mask(&m.plane, a, "masked_distance")?;
            let md = m.plane.data();
            a.data()
                .iter()
                .zip(b.data())
                .enumerate()
                .map(|(i, (x, y))| {
                    let w = md[i / ch] as f64;
                    (w * x - w * y).abs()
                })
                .sum()
        }
    };
    Ok(sum / a.len() as f64)
}

/// Mean of `(m*s - target)^2` over every element.
pub fn masked_squared_to(scores: &Raster, mask: Option<&ActivationMask>, target: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Shape("score raster is empty".into()));
    }
    let ch = scores.channels();
    let sum: f64 = match mask {
        None => scores.data().iter().map(|s| (s - target).powi(2)).sum(),
        Some(m) => {
            check_mask(&m.plane, scores, "masked_squared_to")?;
            let md = m.plane.data();
            scores
                .data()
                .iter()
                .enumerate()
                .map(|(i, s)| (md[i / ch] as f64 * s - target).powi(2))
                .sum()
        }
    };
    Ok(sum / scores.len() as f64)
}

fn l1_parts(a: &Raster, b: &Raster, mask: &ActivationMask, comp: &ActivationMask) -> Result<TermParts> {
    Ok(TermParts {
        plain: masked_distance(a, b, None)?,
        masked: masked_distance(a, b, Some(mask))?,
        complement: masked_distance(a, b, Some(comp))?,
    })
}

fn to_one_parts(s: &Raster, mask: &ActivationMask, comp: &ActivationMask) -> Result<TermParts> {
    Ok(TermParts {
        plain: masked_squared_to(s, None, 1.0)?,
        masked: masked_squared_to(s, Some(mask), 1.0)?,
        complement: masked_squared_to(s, Some(comp), 1.0)?,
    })
}

fn add(a: TermParts, b: TermParts) -> TermParts {
    TermParts {
        plain: a.plain + b.plain,
        masked: a.masked + b.masked,
        complement: a.complement + b.complement,
    }
}

/// Unpaired cycle loss; mask terms act on the stain reconstruction only.
pub fn cycle_terms_unpaired(pack: &CyclePack) -> Result<TermParts> {
    let (m, _) = pack.mask_and_weights()?;
    let comp = m.complement();
    let st = l1_parts(&pack.st.x_hat_i, &pack.st.x_i, m, &comp)?;
    let he = masked_distance(&pack.he.x_hat_he, &pack.he.x_he, None)?;
    Ok(TermParts {
        plain: st.plain + he,
        ..st
    })
}

pub fn cycle_loss_unpaired(pack: &CyclePack) -> Result<f64> {
    let (_, w) = pack.mask_and_weights()?;
    Ok(cycle_terms_unpaired(pack)?.total(w))
}

/// Paired cycle loss; mask terms act on both reconstructions.
pub fn cycle_terms_paired(pack: &CyclePack) -> Result<TermParts> {
    let (m, _) = pack.mask_and_weights()?;
    let comp = m.complement();
    Ok(add(
        l1_parts(&pack.st.x_hat_i, &pack.st.x_i, m, &comp)?,
        l1_parts(&pack.he.x_hat_he, &pack.he.x_he, m, &comp)?,
    ))
}

pub fn cycle_loss_paired(pack: &CyclePack) -> Result<f64> {
    let (_, w) = pack.mask_and_weights()?;
    Ok(cycle_terms_paired(pack)?.total(w))
}

fn check_score_mask(scores: &Raster, mask: &ActivationMask) -> Result<()> {
    check_mask(&mask.plane, scores, "adversarial mask")
}

/// Unpaired adversarial loss: the stain discriminator on `Y_i` plus the
/// masked H&E discriminator on `Y_he`. `mask` must already be at score
/// resolution.
pub fn adv_terms_unpaired(
    d_i_scores: &Raster,
    d_he_scores: &Raster,
    mask: &ActivationMask,
    form: AdvForm,
) -> Result<TermParts> {
    check_score_mask(d_he_scores, mask)?;
    let comp = mask.complement();
    let mut parts = to_one_parts(d_he_scores, mask, &comp)?;
    parts.plain = masked_squared_to(d_i_scores, None, 1.0)?;
    if form == AdvForm::Symmetric {
        parts.plain += masked_squared_to(d_he_scores, None, 1.0)?;
    }
    Ok(parts)
}

pub fn adv_loss_unpaired(
    d_i_scores: &Raster,
    d_he_scores: &Raster,
    mask: &ActivationMask,
    w: &MaskWeights,
) -> Result<f64> {
    Ok(adv_terms_unpaired(d_i_scores, d_he_scores, mask, AdvForm::Literal)?.total(w))
}

/// Paired adversarial loss: unmasked H&E term plus masked terms on both
/// discriminators.
pub fn adv_terms_paired(
    d_i_scores: &Raster,
    d_he_scores: &Raster,
    mask: &ActivationMask,
    form: AdvForm,
) -> Result<TermParts> {
    check_score_mask(d_he_scores, mask)?;
    check_score_mask(d_i_scores, mask)?;
    let comp = mask.complement();
    let mut parts = add(
        to_one_parts(d_he_scores, mask, &comp)?,
        to_one_parts(d_i_scores, mask, &comp)?,
    );
    parts.plain = masked_squared_to(d_he_scores, None, 1.0)?;
    if form == AdvForm::Symmetric {
        parts.plain += masked_squared_to(d_i_scores, None, 1.0)?;
    }
    Ok(parts)
}

pub fn adv_loss_paired(
    d_i_scores: &Raster,
    d_he_scores: &Raster,
    mask: &ActivationMask,
    w: &MaskWeights,
) -> Result<f64> {
    Ok(adv_terms_paired(d_i_scores, d_he_scores, mask, AdvForm::Literal)?.total(w))
}

/// Direct supervision against the aligned real tiles (paired data only).
pub fn supervised_terms(pack: &CyclePack) -> Result<TermParts> {
    if !pack.paired {
        return Err(Error::Contract("supervised loss needs paired tiles".into()));
    }
    let (m, _) = pack.mask_and_weights()?;
    let comp = m.complement();
    Ok(add(
        l1_parts(&pack.he.y_hat_i, &pack.st.x_i, m, &comp)?,
        l1_parts(&pack.st.y_hat_he, &pack.he.x_he, m, &comp)?,
    ))
}

pub fn supervised_loss(pack: &CyclePack) -> Result<f64> {
    let (_, w) = pack.mask_and_weights()?;
    Ok(supervised_terms(pack)?.total(w))
}

/// Stain discriminator loss, `lambda_d * (L_real + L_synthetic)`, with the
/// real-side mask terms.
pub fn disc_loss_stain(
    d_real: &Raster,
    d_fake: &Raster,
    mask: &ActivationMask,
    w: &MaskWeights,
    lambda_d: f64,
) -> Result<f64> {
    check_score_mask(d_real, mask)?;
    let comp = mask.complement();
    let real = to_one_parts(d_real, mask, &comp)?.total(w);
    let fake = masked_squared_to(d_fake, None, 0.0)?;
    Ok(lambda_d * (real + fake))
}

pub fn disc_loss_he(d_real: &Raster, d_fake: &Raster, lambda_d: f64) -> Result<f64> {
    Ok(lambda_d * (masked_squared_to(d_real, None, 1.0)? + masked_squared_to(d_fake, None, 0.0)?))
}

fn branch_terms(
    branch: Branch,
    a: &Raster,
    b: &Raster,
    mask: Option<&ActivationMask>,
    w: Option<&MaskWeights>,
    what: &str,
) -> Result<f64> {
    match (branch, mask, w) {
        (Branch::He, None, _) => masked_distance(a, b, None),
        (Branch::He, Some(_), _) => Err(Error::Contract(format!("{what}: H&E branch takes no mask"))),
        (Branch::Stain, Some(m), Some(w)) => {
            let comp = m.complement();
            Ok(l1_parts(a, b, m, &comp)?.total(w))
        }
        (Branch::Stain, _, _) => Err(Error::Contract(format!(
            "{what}: stain branch needs mask and weights"
        ))),
    }
}

/// Identity (auto-encoding) loss between `x` and `G_d(E_d(x))`.
pub fn identity_loss(
    branch: Branch,
    x: &Raster,
    g_of_e_x: &Raster,
    mask: Option<&ActivationMask>,
    w: Option<&MaskWeights>,
) -> Result<f64> {
    branch_terms(branch, g_of_e_x, x, mask, w, "identity loss")
}

/// Latent loss between `Z` and its re-encoding `Z_hat`. The mask must be at
/// latent resolution.
pub fn latent_loss(
    branch: Branch,
    z: &Raster,
    z_hat: &Raster,
    mask: Option<&ActivationMask>,
    w: Option<&MaskWeights>,
) -> Result<f64> {
    z.check_same_dims(z_hat, "latent loss")?;
    branch_terms(branch, z_hat, z, mask, w, "latent loss")
}

/// Forward loss on degraded versions of the source tile and its
/// cross-domain generation. The stain branch degrades the mask as well.
pub fn forward_loss(
    branch: Branch,
    x_src: &Raster,
    y_hat_cross: &Raster,
    mask: Option<&ActivationMask>,
    w: Option<&MaskWeights>,
    degrade: &DegradeSpec,
) -> Result<f64> {
    let xs = degrade.apply(x_src);
    let ys = degrade.apply(y_hat_cross);
    let small = mask.map(|m| degrade.apply_mask(m));
    branch_terms(branch, &ys, &xs, small.as_ref(), w, "forward loss")
}

pub fn reg_loss(idt: f64, lat: f64, fwd: f64, w: &LossWeights) -> f64 {
    w.lambda_idt * idt + w.lambda_lat * lat + w.lambda_fwd * fwd
}

pub fn synthesis_loss(cyc: f64, adv: f64, reg: f64, w: &LossWeights) -> f64 {
    w.lambda_cyc * cyc + w.lambda_adv * adv + w.lambda_reg * reg
}

/// Mean of the per-stain synthesis losses.
pub fn he_regularization_loss(ihc_losses: &[f64]) -> Result<f64> {
    if ihc_losses.is_empty() {
        return Err(Error::Domain("H&E regularization over zero stains".into()));
    }
    Ok(ihc_losses.iter().sum::<f64>() / ihc_losses.len() as f64)
}

pub mod grad {
    //! Fused value-and-gradient forms of the kernels above.
    //!
    //! Each function returns the loss value and adds `scale * dL/dinput`
    //! into the supplied gradient buffers.

    use crate::raster::{BitPlane, Raster};

    #[inline]
    fn sign(v: f64) -> f64 {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    }

    /// `plain + alpha*masked + beta*complement` mean absolute error between
    /// `a` and `b`. With `mask = None` only the plain term is present.
    #[allow(clippy::too_many_arguments)]
    pub fn l1_terms(
        a: &Raster,
        b: &Raster,
        mask: Option<&BitPlane>,
        alpha: f64,
        beta: f64,
        scale: f64,
        grad_a: Option<&mut Raster>,
        grad_b: Option<&mut Raster>,
    ) -> f64 {
        debug_assert!(a.same_dims(b));
        let ch = a.channels();
        let n = a.len() as f64;
        let mut ga = grad_a;
        let mut gb = grad_b;
        let mut sum = 0.0;
        for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
            let coef = match mask {
                None => 1.0,
                Some(m) => {
                    if m.data()[i / ch] != 0 {
                        1.0 + alpha
                    } else {
                        1.0 + beta
                    }
                }
            };
            let d = x - y;
            sum += coef * d.abs();
            let g = scale * coef * sign(d) / n;
            if let Some(ga) = ga.as_deref_mut() {
                ga.data_mut()[i] += g;
            }
            if let Some(gb) = gb.as_deref_mut() {
                gb.data_mut()[i] -= g;
            }
        }
        sum / n
    }

    /// `c_plain*mean((s-t)^2) + alpha*mean((m s - t)^2) + beta*mean(((1-m) s - t)^2)`.
    #[allow(clippy::too_many_arguments)]
    pub fn sq_terms(
        s: &Raster,
        target: f64,
        mask: Option<&BitPlane>,
        c_plain: f64,
        alpha: f64,
        beta: f64,
        scale: f64,
        grad_s: Option<&mut Raster>,
    ) -> f64 {
        let ch = s.channels();
        let n = s.len() as f64;
        let mut gs = grad_s;
        let mut sum = 0.0;
        for (i, &v) in s.data().iter().enumerate() {
            let mut val = c_plain * (v - target).powi(2);
            let mut g = c_plain * 2.0 * (v - target);
            if let Some(m) = mask {
                let mi = m.data()[i / ch] as f64;
                let ci = 1.0 - mi;
                val += alpha * (mi * v - target).powi(2) + beta * (ci * v - target).powi(2);
                g += alpha * 2.0 * mi * (mi * v - target) + beta * 2.0 * ci * (ci * v - target);
            }
            sum += val;
            if let Some(gs) = gs.as_deref_mut() {
                gs.data_mut()[i] += scale * g / n;
            }
        }
        sum / n
    }
}
