//! Desk-scale translation models: per-domain encoder, generator and
//! dual-head discriminator, one shared H&E triple plus one triple per stain.

pub mod adam;
pub mod discriminator;
pub mod network;
pub mod objective;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState};
pub use discriminator::{DiscSpec, Discriminator, HeadScores};
pub use network::{Activation, Init, LayerSpec, Network};

use crate::error::{Error, Result};
use crate::loss::{CyclePack, HeCycle, StainCycle};
use crate::raster::Raster;
use crate::stain_mask::{compute_mask_weights, extract_activation_mask, MaskWeights, StainConfig};

/// `He` is the shared H&E domain; `Stain(i)` uses 1-based stain ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    He,
    Stain(usize),
}

impl Domain {
    pub fn index(self) -> usize {
        match self {
            Domain::He => 0,
            Domain::Stain(i) => i,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Domain::He
        } else {
            Domain::Stain(i)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Encoder,
    Generator,
    Discriminator,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Encoder, Component::Generator, Component::Discriminator];

    pub fn name(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::Generator => "generator",
            Component::Discriminator => "discriminator",
        }
    }
}

/// Architecture shared by every domain triple.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSpec {
    pub latent_channels: usize,
    pub disc_hidden: usize,
    pub patch: usize,
    /// Weight half-width of the centred random colour features that
    /// discriminator heads start from; 0 falls back to the plain init.
    pub disc_feature_scale: f64,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            disc_hidden: 8,
            patch: 4,
            disc_feature_scale: 4.0,
        }
    }
}

impl ArchSpec {
    pub fn encoder_layers(&self) -> Vec<LayerSpec> {
        let c = self.latent_channels;
        vec![
            LayerSpec { in_ch: 3, out_ch: c, depthwise: true, activation: Activation::SoftClip },
            LayerSpec { in_ch: c, out_ch: c, depthwise: false, activation: Activation::SoftClip },
        ]
    }

    pub fn generator_layers(&self) -> Vec<LayerSpec> {
        let c = self.latent_channels;
        vec![
            LayerSpec { in_ch: c, out_ch: c, depthwise: true, activation: Activation::SoftClip },
            LayerSpec { in_ch: c, out_ch: 3, depthwise: false, activation: Activation::SoftClip },
        ]
    }

    pub fn disc_spec(&self) -> DiscSpec {
        DiscSpec {
            hidden: self.disc_hidden,
            patch: self.patch,
        }
    }

    pub fn component_params(&self, c: Component) -> usize {
        match c {
            Component::Encoder => network::stack_param_count(&self.encoder_layers()),
            Component::Generator => network::stack_param_count(&self.generator_layers()),
            Component::Discriminator => self.disc_spec().param_count(),
        }
    }

    pub fn triple_params(&self) -> usize {
        Component::ALL.iter().map(|&c| self.component_params(c)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels < 3 || self.disc_hidden == 0 || self.patch == 0 || !(self.disc_feature_scale >= 0.0) {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }
}

/// Encoder, generator and discriminator of one domain. Components may be
/// absent when only part of a checkpoint was loaded.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelTriple {
    pub encoder: Option<Network>,
    pub generator: Option<Network>,
    pub discriminator: Option<Discriminator>,
}

impl ModelTriple {
    pub fn init(arch: &ArchSpec, init: Init, rng: &mut impl Rng) -> Self {
        Self {
            encoder: Some(Network::new(arch.encoder_layers(), init, rng)),
            generator: Some(Network::new(arch.generator_layers(), init, rng)),
            discriminator: Some(Discriminator::with_feature_scale(arch.disc_spec(), init, arch.disc_feature_scale, rng)),
        }
    }

    pub fn params(&self, c: Component) -> Option<&[f64]> {
        match c {
            Component::Encoder => self.encoder.as_ref().map(|n| n.params.as_slice()),
            Component::Generator => self.generator.as_ref().map(|n| n.params.as_slice()),
            Component::Discriminator => self.discriminator.as_ref().map(|d| d.params.as_slice()),
        }
    }

    pub fn params_mut(&mut self, c: Component) -> Option<&mut Vec<f64>> {
        match c {
            Component::Encoder => self.encoder.as_mut().map(|n| &mut n.params),
            Component::Generator => self.generator.as_mut().map(|n| &mut n.params),
            Component::Discriminator => self.discriminator.as_mut().map(|d| &mut d.params),
        }
    }
}

/// All S + 1 triples; index 0 is H&E.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBank {
    pub arch: ArchSpec,
    pub triples: Vec<ModelTriple>,
}

impl ModelBank {
    pub fn new(arch: ArchSpec, num_stains: usize, init: Init, rng: &mut impl Rng) -> Self {
        let triples = (0..=num_stains).map(|_| ModelTriple::init(&arch, init, rng)).collect();
        Self { arch, triples }
    }

    /// Bank with `num_stains` stain slots and nothing loaded.
    pub fn empty(arch: ArchSpec, num_stains: usize) -> Self {
        Self {
            arch,
            triples: vec![ModelTriple::default(); num_stains + 1],
        }
    }

    pub fn num_stains(&self) -> usize {
        self.triples.len() - 1
    }

    pub fn triple(&self, d: Domain) -> Result<&ModelTriple> {
        self.triples
            .get(d.index())
            .ok_or_else(|| Error::State(format!("no model slot for {d:?}")))
    }

    pub fn triple_mut(&mut self, d: Domain) -> Result<&mut ModelTriple> {
        let n = self.triples.len();
        self.triples
            .get_mut(d.index())
            .ok_or_else(|| Error::State(format!("no model slot for {d:?} in bank of {n}")))
    }

    pub fn encoder(&self, d: Domain) -> Result<&Network> {
        self.triple(d)?
            .encoder
            .as_ref()
            .ok_or_else(|| Error::State(format!("{d:?} encoder not loaded")))
    }

    pub fn generator(&self, d: Domain) -> Result<&Network> {
        self.triple(d)?
            .generator
            .as_ref()
            .ok_or_else(|| Error::State(format!("{d:?} generator not loaded")))
    }

    pub fn discriminator(&self, d: Domain) -> Result<&Discriminator> {
        self.triple(d)?
            .discriminator
            .as_ref()
            .ok_or_else(|| Error::State(format!("{d:?} discriminator not loaded")))
    }

    /// `G_i(E_he(x))`: the virtual stain of an H&E tile.
    pub fn translate(&self, x_he: &Raster, stain: usize) -> Result<Raster> {
        let z = self.encoder(Domain::He)?.forward(x_he)?;
        self.generator(Domain::Stain(stain))?.forward(&z)
    }

    /// Order-sensitive checksum of one component's parameters.
    pub fn checksum(&self, d: Domain, c: Component) -> Option<u64> {
        self.triple(d).ok()?.params(c).map(checksum)
    }
}

/// FNV-1a over the parameter bit patterns.
pub fn checksum(params: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in params {
        for b in p.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// H&E cycle: `Y_i = G_i(E_he(X_he))`, `X_he' = G_he(E_i(Y_i))`.
pub fn he_cycle_forward(bank: &ModelBank, x_he: &Raster, stain: usize) -> Result<HeCycle> {
    let si = Domain::Stain(stain);
    let z_he = bank.encoder(Domain::He)?.forward(x_he)?;
    let y_hat_i = bank.generator(si)?.forward(&z_he)?;
    let z_hat_he = bank.encoder(si)?.forward(&y_hat_i)?;
    let x_hat_he = bank.generator(Domain::He)?.forward(&z_hat_he)?;
    Ok(HeCycle {
        x_he: x_he.clone(),
        z_he,
        y_hat_i,
        z_hat_he,
        x_hat_he,
    })
}

/// Stain cycle: `Y_he = G_he(E_i(X_i))`, `X_i' = G_i(E_he(Y_he))`.
pub fn stain_cycle_forward(bank: &ModelBank, x_i: &Raster, stain: usize) -> Result<StainCycle> {
    let si = Domain::Stain(stain);
    let z_i = bank.encoder(si)?.forward(x_i)?;
    let y_hat_he = bank.generator(Domain::He)?.forward(&z_i)?;
    let z_hat_i = bank.encoder(Domain::He)?.forward(&y_hat_he)?;
    let x_hat_i = bank.generator(si)?.forward(&z_hat_i)?;
    Ok(StainCycle {
        x_i: x_i.clone(),
        z_i,
        y_hat_he,
        z_hat_i,
        x_hat_i,
    })
}

/// Run both cycles and attach the stain tile's activation mask. With
/// `masking` off the weights are zero, so every mask term vanishes.
pub fn build_cycle_pack(
    bank: &ModelBank,
    x_he: &Raster,
    x_i: &Raster,
    stain: &StainConfig,
    paired: bool,
    masking: bool,
) -> Result<CyclePack> {
    let he = he_cycle_forward(bank, x_he, stain.stain_id)?;
    let st = stain_cycle_forward(bank, x_i, stain.stain_id)?;
    let mask = extract_activation_mask(x_i, stain)?;
    let mut weights = compute_mask_weights(&mask)?;
    if !masking {
        weights = MaskWeights::disabled(weights.n_fg, weights.n_bg);
    }
    Ok(CyclePack {
        stain: stain.stain_id,
        he,
        st,
        mask: Some(mask),
        weights: Some(weights),
        paired,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCountReport {
    pub num_stains: usize,
    pub unified: bool,
    pub per_component: Vec<(String, usize)>,
    pub per_triple: usize,
    pub unified_total: usize,
    pub pairwise_total: usize,
    /// Total of the requested configuration.
    pub total: usize,
    pub ratio: f64,
}

/// Trainable parameters of the unified model (S + 1 triples) against a
/// pairwise baseline with one two-domain model per stain (2S triples).
pub fn count_parameters(num_stains: usize, arch: &ArchSpec, unified: bool) -> Result<ParamCountReport> {
    if num_stains == 0 {
        return Err(Error::Config("need at least one stain".into()));
    }
    let per_triple = arch.triple_params();
    let unified_total = (num_stains + 1) * per_triple;
    let pairwise_total = 2 * num_stains * per_triple;
    Ok(ParamCountReport {
        num_stains,
        unified,
        per_component: Component::ALL
            .iter()
            .map(|&c| (c.name().to_string(), arch.component_params(c)))
            .collect(),
        per_triple,
        unified_total,
        pairwise_total,
        total: if unified { unified_total } else { pairwise_total },
        ratio: unified_total as f64 / pairwise_total as f64,
    })
}
