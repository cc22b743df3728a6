//! Dual-cycle training loop with the shared-H&E regularization step.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{self, AdvForm, LossReport, LossWeights};
use crate::model::objective::{disc_step, generator_report, generator_step, GeneratorGrads, ObjectiveConfig};
use crate::model::{AdamState, ArchSpec, Component, Domain, Init, ModelBank};
use crate::raster::Raster;
use crate::stain_mask::{compute_mask_weights, extract_activation_mask, ActivationMask, DegradeSpec, MaskWeights, StainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StainOrder {
    #[default]
    Random,
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub num_stains: usize,
    pub paired: bool,
    pub batch_size: usize,
    pub fixed_epochs: usize,
    pub decay_epochs: usize,
    pub base_lr: f64,
    pub iterations_per_epoch: usize,
    pub loss_weights: LossWeights,
    pub rng_seed: u64,
    pub stain_order: StainOrder,
    /// Apply the H&E regularization step every this many iterations.
    pub he_reg_period: usize,
    /// Dynamic mask weights on; off zeroes alpha and beta.
    pub masking: bool,
    pub adv_form: AdvForm,
    pub degrade: DegradeSpec,
    pub sup_weight: f64,
    pub arch: ArchSpec,
    pub init: Init,
    /// Fill the masked/complement split of each report (one extra forward).
    pub detailed_report: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            num_stains: 1,
            paired: false,
            batch_size: 6,
            fixed_epochs: 75,
            decay_epochs: 500,
            base_lr: 2e-4,
            iterations_per_epoch: 100,
            loss_weights: LossWeights::default(),
            rng_seed: 0,
            stain_order: StainOrder::Random,
            he_reg_period: 1,
            masking: true,
            adv_form: AdvForm::Literal,
            degrade: DegradeSpec::default(),
            sup_weight: 1.0,
            arch: ArchSpec::default(),
            init: Init::default(),
            detailed_report: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_stains == 0 {
            return Err(Error::Config("num_stains must be >= 1".into()));
        }
        if self.batch_size == 0 || self.iterations_per_epoch == 0 || self.he_reg_period == 0 {
            return Err(Error::Config(
                "batch_size, iterations_per_epoch and he_reg_period must be >= 1".into(),
            ));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        self.loss_weights.validate()?;
        self.arch.validate()
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            weights: self.loss_weights,
            paired: self.paired,
            adv_form: self.adv_form,
            degrade: self.degrade,
            sup_weight: self.sup_weight,
        }
    }
}

/// Constant for `fixed_epochs`, then linear decay, floored at 0.
pub fn lr_at(epoch: usize, cfg: &TrainingConfig) -> f64 {
    if epoch < cfg.fixed_epochs {
        return cfg.base_lr;
    }
    if cfg.decay_epochs == 0 {
        return 0.0;
    }
    let frac = (epoch - cfg.fixed_epochs + 1) as f64 / cfg.decay_epochs as f64;
    (cfg.base_lr * (1.0 - frac)).max(0.0)
}

/// One training pair of a stain: an H&E tile, a stain tile and the stain
/// tile's activation mask.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub x_he: Raster,
    pub x_i: Raster,
    pub mask: ActivationMask,
    pub weights: MaskWeights,
}

#[derive(Clone, Debug)]
pub struct StainBatch {
    pub stain: usize,
    pub samples: Vec<TrainSample>,
}

/// Tiles of one stain with their masks. H&E and stain tiles are aligned
/// by index when the data is paired.
#[derive(Clone, Debug)]
pub struct PairSet {
    pub stain: usize,
    pub he: Vec<Raster>,
    pub tiles: Vec<Raster>,
    pub masks: Vec<ActivationMask>,
    pub weights: Vec<MaskWeights>,
}

impl PairSet {
    pub fn new(stain: &StainConfig, he: Vec<Raster>, tiles: Vec<Raster>) -> Result<Self> {
        if he.is_empty() || tiles.is_empty() {
            return Err(Error::Config(format!("stain {} has no training tiles", stain.stain_id)));
        }
        let masks = tiles
            .par_iter()
            .map(|t| extract_activation_mask(t, stain))
            .collect::<Result<Vec<_>>>()?;
        let weights = masks.iter().map(compute_mask_weights).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            stain: stain.stain_id,
            he,
            tiles,
            masks,
            weights,
        })
    }

    fn sample(&self, paired: bool, rng: &mut impl Rng) -> TrainSample {
        let j = rng.gen_range(0..self.tiles.len());
        let i = if paired { j.min(self.he.len() - 1) } else { rng.gen_range(0..self.he.len()) };
        TrainSample {
            x_he: self.he[i].clone(),
            x_i: self.tiles[j].clone(),
            mask: self.masks[j].clone(),
            weights: self.weights[j],
        }
    }
}

/// Draw `batch_size` samples per stain. Unpaired draws independent H&E and
/// stain indices.
pub fn sample_batch(sets: &[PairSet], batch_size: usize, paired: bool, rng: &mut impl Rng) -> Vec<StainBatch> {
    sets.iter()
        .map(|s| StainBatch {
            stain: s.stain,
            samples: (0..batch_size).map(|_| s.sample(paired, rng)).collect(),
        })
        .collect()
}

/// Where the trainer is inside an iteration, for observers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// After all updates of the per-stain step for this stain.
    Stain(usize),
    /// After the shared H&E regularization update.
    HeRegularization,
}

pub struct Trainer {
    pub bank: ModelBank,
    pub cfg: TrainingConfig,
    pub iteration: usize,
    optim: Vec<[AdamState; 3]>,
    rng: ChaCha8Rng,
    pending_losses: Vec<f64>,
    pending_grads: Option<(Vec<f64>, Vec<f64>)>,
}

fn comp_index(c: Component) -> usize {
    match c {
        Component::Encoder => 0,
        Component::Generator => 1,
        Component::Discriminator => 2,
    }
}

impl Trainer {
    pub fn new(cfg: TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let bank = ModelBank::new(cfg.arch, cfg.num_stains, cfg.init, &mut rng);
        Self::assemble(bank, cfg, rng)
    }

    /// Continue training an existing bank.
    pub fn from_bank(bank: ModelBank, cfg: TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        if bank.num_stains() != cfg.num_stains || bank.arch != cfg.arch {
            return Err(Error::Config("bank does not match the training config".into()));
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        Self::assemble(bank, cfg, rng)
    }

    fn assemble(bank: ModelBank, cfg: TrainingConfig, rng: ChaCha8Rng) -> Result<Self> {
        let mut optim = Vec::with_capacity(bank.triples.len());
        for t in &bank.triples {
            let mk = |c: Component| -> Result<AdamState> {
                let n = t
                    .params(c)
                    .ok_or_else(|| Error::State(format!("{} missing from bank", c.name())))?
                    .len();
                Ok(AdamState::new(n, cfg.base_lr))
            };
            optim.push([mk(Component::Encoder)?, mk(Component::Generator)?, mk(Component::Discriminator)?]);
        }
        Ok(Self {
            bank,
            cfg,
            iteration: 0,
            optim,
            rng,
            pending_losses: Vec::new(),
            pending_grads: None,
        })
    }

    pub fn epoch(&self) -> usize {
        self.iteration / self.cfg.iterations_per_epoch
    }

    pub fn lr(&self) -> f64 {
        lr_at(self.epoch(), &self.cfg)
    }

    /// The trainer's own generator, for drawing batches reproducibly.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn update(&mut self, d: Domain, c: Component, grads: &[f64], lr: f64) -> Result<()> {
        let state = &mut self.optim[d.index()][comp_index(c)];
        state.lr = lr;
        let params = self
            .bank
            .triple_mut(d)?
            .params_mut(c)
            .ok_or_else(|| Error::State(format!("{d:?} {} not loaded", c.name())))?;
        state.step(params, grads, &format!("{d:?}/{}", c.name()))
    }

    pub fn train_iteration(&mut self, batch: &[StainBatch]) -> Result<Vec<LossReport>> {
        self.train_iteration_observed(batch, &mut |_, _| {})
    }

    /// One iteration: per-stain updates in a random (or fixed) order, then
    /// the shared H&E step. `observe` sees the bank after each phase.
    /// Returns one report per stain plus, when the H&E step ran, a final
    /// report with `stain = 0` whose objective is the H&E loss.
    pub fn train_iteration_observed(
        &mut self,
        batch: &[StainBatch],
        observe: &mut dyn FnMut(Phase, &ModelBank),
    ) -> Result<Vec<LossReport>> {
        let s = self.cfg.num_stains;
        let mut order: Vec<usize> = (1..=s).collect();
        if self.cfg.stain_order == StainOrder::Random {
            order.shuffle(&mut self.rng);
        }
        let lr = self.lr();
        let mut reports = Vec::with_capacity(s + 1);
        for stain in order {
            let sb = batch
                .iter()
                .find(|b| b.stain == stain)
                .ok_or_else(|| Error::Config(format!("batch has no tiles for stain {stain}")))?;
            if sb.samples.is_empty() {
                return Err(Error::Config(format!("empty batch for stain {stain}")));
            }
            let mut r = self.stain_step(sb, lr)?;
            r.iteration = self.iteration;
            reports.push(r);
            observe(Phase::Stain(stain), &self.bank);
        }
        if (self.iteration + 1) % self.cfg.he_reg_period == 0 {
            let l_he = loss::he_regularization_loss(&self.pending_losses)?;
            let (mut ge, mut gg) = self.pending_grads.take().expect("pending H&E gradients");
            let k = self.pending_losses.len() as f64;
            ge.iter_mut().chain(gg.iter_mut()).for_each(|g| *g /= k);
            self.update(Domain::He, Component::Encoder, &ge, lr)?;
            self.update(Domain::He, Component::Generator, &gg, lr)?;
            self.pending_losses.clear();
            reports.push(LossReport {
                iteration: self.iteration,
                stain: 0,
                ihc_total: l_he,
                objective: l_he,
                ..Default::default()
            });
            observe(Phase::HeRegularization, &self.bank);
        }
        self.iteration += 1;
        Ok(reports)
    }

    fn stain_step(&mut self, sb: &StainBatch, lr: f64) -> Result<LossReport> {
        let stain = sb.stain;
        let ocfg = self.cfg.objective();
        let masking = self.cfg.masking;
        let weights = |t: &TrainSample| {
            if masking {
                t.weights
            } else {
                MaskWeights::disabled(t.weights.n_fg, t.weights.n_bg)
            }
        };
        let bank = &self.bank;
        let steps = sb
            .samples
            .par_iter()
            .map(|t| generator_step(bank, &t.x_he, &t.x_i, stain, &t.mask, &weights(t), &ocfg))
            .collect::<Result<Vec<_>>>()?;
        let n = steps.len() as f64;
        let mut grads = GeneratorGrads::zeros(bank);
        let mut he_e = vec![0.0; grads.e_he.len()];
        let mut he_g = vec![0.0; grads.g_he.len()];
        let (mut value, mut ihc) = (0.0, 0.0);
        let mut terms = crate::model::objective::TermValues::default();
        for st in &steps {
            grads.add(&st.grads);
            he_e.iter_mut().zip(&st.ihc_he_grads.0).for_each(|(a, b)| *a += b);
            he_g.iter_mut().zip(&st.ihc_he_grads.1).for_each(|(a, b)| *a += b);
            value += st.value;
            ihc += st.ihc_value;
            terms.add(&st.terms);
        }
        grads.scale(1.0 / n);
        he_e.iter_mut().chain(he_g.iter_mut()).for_each(|g| *g /= n);
        terms.scale(1.0 / n);

        let mut report = if self.cfg.detailed_report {
            let reps = sb
                .samples
                .par_iter()
                .map(|t| generator_report(bank, &t.x_he, &t.x_i, stain, &t.mask, &weights(t), &ocfg))
                .collect::<Result<Vec<_>>>()?;
            mean_report(&reps)
        } else {
            LossReport::default()
        };
        report.stain = stain;
        report.cyc = terms.cyc;
        report.adv = terms.adv;
        report.sup = terms.sup;
        report.idt = terms.idt;
        report.lat = terms.lat;
        report.fwd = terms.fwd;
        report.reg = loss::reg_loss(terms.idt, terms.lat, terms.fwd, &ocfg.weights);
        report.ihc_total = ihc / n;
        report.objective = value / n;

        let si = Domain::Stain(stain);
        let d_i = self.bank.discriminator(si)?;
        let d_he = self.bank.discriminator(Domain::He)?;
        let lambda_d = ocfg.weights.lambda_d;
        let disc = sb
            .samples
            .par_iter()
            .zip(&steps)
            .map(|(t, st)| -> Result<_> {
                let w = weights(t);
                let a = disc_step(d_i, &t.x_i, &st.y_hat_i, Some((&t.mask, &w)), lambda_d)?;
                let b = disc_step(d_he, &t.x_he, &st.y_hat_he, None, lambda_d)?;
                Ok((a, b))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut gdi = vec![0.0; d_i.param_count()];
        let mut gdhe = vec![0.0; d_he.param_count()];
        let (mut vdi, mut vdhe) = (0.0, 0.0);
        for ((va, ga), (vb, gb)) in &disc {
            vdi += va;
            vdhe += vb;
            gdi.iter_mut().zip(ga).for_each(|(x, y)| *x += y);
            gdhe.iter_mut().zip(gb).for_each(|(x, y)| *x += y);
        }
        gdi.iter_mut().chain(gdhe.iter_mut()).for_each(|g| *g /= n);
        report.disc_stain = vdi / n;
        report.disc_he = vdhe / n;

        self.update(si, Component::Encoder, &grads.e_i, lr)?;
        self.update(si, Component::Generator, &grads.g_i, lr)?;
        self.update(Domain::He, Component::Encoder, &grads.e_he, lr)?;
        self.update(Domain::He, Component::Generator, &grads.g_he, lr)?;
        self.update(si, Component::Discriminator, &gdi, lr)?;
        self.update(Domain::He, Component::Discriminator, &gdhe, lr)?;

        self.pending_losses.push(report.ihc_total);
        match &mut self.pending_grads {
            Some((e, g)) => {
                e.iter_mut().zip(&he_e).for_each(|(a, b)| *a += b);
                g.iter_mut().zip(&he_g).for_each(|(a, b)| *a += b);
            }
            None => self.pending_grads = Some((he_e, he_g)),
        }
        Ok(report)
    }
}

fn mean_report(reps: &[LossReport]) -> LossReport {
    let n = reps.len() as f64;
    let mut out = LossReport::default();
    for r in reps {
        for (a, b) in [
            (&mut out.cyc_parts, &r.cyc_parts),
            (&mut out.adv_parts, &r.adv_parts),
            (&mut out.sup_parts, &r.sup_parts),
        ] {
            a.plain += b.plain / n;
            a.masked += b.masked / n;
            a.complement += b.complement / n;
        }
        out.alpha += r.alpha / n;
        out.beta += r.beta / n;
    }
    out
}

/// Append one report as a JSON line.
pub fn write_log_line(out: &mut impl Write, report: &LossReport) -> Result<()> {
    serde_json::to_writer(&mut *out, report)?;
    out.write_all(b"\n").map_err(|e| Error::io("training log", e))
}
