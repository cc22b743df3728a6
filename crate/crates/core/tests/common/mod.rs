#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vstain_core::loss::LossWeights;
use vstain_core::model::objective::{generator_report, ObjectiveConfig};
use vstain_core::model::{he_cycle_forward, stain_cycle_forward, ArchSpec, Component, Domain, Init, ModelBank};
use vstain_core::raster::{BitPlane, Raster};
use vstain_core::stain_mask::{compute_mask_weights, ActivationMask, MaskWeights};

pub struct GradFixture {
    pub bank: ModelBank,
    pub x_he: Raster,
    pub x_i: Raster,
    pub stain: usize,
    pub mask: ActivationMask,
    pub mw: MaskWeights,
    pub cfg: ObjectiveConfig,
}

pub fn grad_fixture(seed: u64, size: usize, paired: bool, regs: bool) -> GradFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bank = ModelBank::new(ArchSpec::default(), 2, Init::Noise { scale: 0.3 }, &mut rng);
    let x_he = Raster::from_fn(size, size, 3, |_, _, _| rng.gen_range(0.0..1.0));
    let x_i = Raster::from_fn(size, size, 3, |_, _, _| rng.gen_range(0.0..1.0));
    let mask = ActivationMask::new(BitPlane::from_fn(size, size, |_, _| rng.gen_bool(0.3)));
    let mw = compute_mask_weights(&mask).unwrap();
    let mut weights = LossWeights::default();
    if regs {
        weights.lambda_idt = 1.0;
        weights.lambda_lat = 1.0;
        weights.lambda_fwd = 1.0;
    }
    let mut cfg = ObjectiveConfig { weights, paired, ..Default::default() };
    cfg.degrade.sigma = 1.0;
    let stain = 1 + (seed as usize % 2);
    GradFixture { bank, x_he, x_i, stain, mask, mw, cfg }
}

impl GradFixture {
    pub fn objective(&self, bank: &ModelBank) -> f64 {
        generator_report(bank, &self.x_he, &self.x_i, self.stain, &self.mask, &self.mw, &self.cfg)
            .unwrap()
            .objective
    }

    /// Signs of every difference that enters an absolute value, so a
    /// finite-difference stencil crossing an MAE kink can be detected.
    pub fn l1_signs(&self, bank: &ModelBank) -> Vec<i8> {
        let he = he_cycle_forward(bank, &self.x_he, self.stain).unwrap();
        let st = stain_cycle_forward(bank, &self.x_i, self.stain).unwrap();
        let si = Domain::Stain(self.stain);
        let mut pairs: Vec<(Raster, Raster)> = vec![
            (st.x_hat_i.clone(), self.x_i.clone()),
            (he.x_hat_he.clone(), self.x_he.clone()),
            (st.z_hat_i.clone(), st.z_i.clone()),
            (he.z_hat_he.clone(), he.z_he.clone()),
            (he.y_hat_i.clone(), self.x_i.clone()),
            (st.y_hat_he.clone(), self.x_he.clone()),
        ];
        let a_i = bank.generator(si).unwrap().forward(&st.z_i).unwrap();
        let a_he = bank.generator(Domain::He).unwrap().forward(&he.z_he).unwrap();
        pairs.push((a_i, self.x_i.clone()));
        pairs.push((a_he, self.x_he.clone()));
        let dg = self.cfg.degrade;
        pairs.push((dg.apply(&st.y_hat_he), dg.apply(&self.x_i)));
        pairs.push((dg.apply(&he.y_hat_i), dg.apply(&self.x_he)));
        pairs
            .iter()
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).signum() as i8).collect::<Vec<_>>())
            .collect()
    }
}

pub const GEN_PARTS: [(Domain, Component); 2] = [(Domain::He, Component::Encoder), (Domain::He, Component::Generator)];

pub struct FdResult {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
}

/// Central differences over every generator-side parameter, skipping
/// coordinates whose stencil crosses an MAE kink.
pub fn fd_check(
    fx: &GradFixture,
    analytic: &dyn Fn(Domain, Component) -> Vec<f64>,
    h: f64,
    floor: f64,
) -> FdResult {
    let si = Domain::Stain(fx.stain);
    let targets = [
        (Domain::He, Component::Encoder),
        (Domain::He, Component::Generator),
        (si, Component::Encoder),
        (si, Component::Generator),
    ];
    let mut res = FdResult { checked: 0, skipped: 0, worst: 0.0 };
    let mut bank = fx.bank.clone();
    for (d, c) in targets {
        let g = analytic(d, c);
        for k in 0..g.len() {
            let p0 = bank.triple(d).unwrap().params(c).unwrap()[k];
            bank.triple_mut(d).unwrap().params_mut(c).unwrap()[k] = p0 + h;
            let lp = fx.objective(&bank);
            let sp = fx.l1_signs(&bank);
            bank.triple_mut(d).unwrap().params_mut(c).unwrap()[k] = p0 - h;
            let lm = fx.objective(&bank);
            let sm = fx.l1_signs(&bank);
            bank.triple_mut(d).unwrap().params_mut(c).unwrap()[k] = p0;
            if sp != sm {
                res.skipped += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * h);
            let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(floor);
            res.worst = res.worst.max(rel);
            res.checked += 1;
        }
    }
    res
}
