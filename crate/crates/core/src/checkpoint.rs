//! On-disk models: one JSON file per (domain, component) plus a manifest.
//! Splitting per component lets inference open only what it needs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::model::{ArchSpec, Component, Discriminator, Domain, ModelBank, Network};
use crate::stain_mask::StainConfig;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub num_stains: usize,
    pub arch: ArchSpec,
    pub iteration: usize,
    /// Stain bands in id order; `stains[k - 1]` belongs to stain `k`.
    pub stains: Vec<StainConfig>,
    pub qc_interval: Option<(f64, f64)>,
}

impl Manifest {
    pub fn stain_id(&self, name: &str) -> Result<usize> {
        self.stains
            .iter()
            .find(|s| s.stain_name == name)
            .map(|s| s.stain_id)
            .ok_or_else(|| Error::Config(format!("unknown stain {name:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentFile {
    version: u32,
    domain: Domain,
    component: Component,
    params: Vec<f64>,
}

pub fn domain_name(d: Domain) -> String {
    match d {
        Domain::He => "he".into(),
        Domain::Stain(i) => format!("stain{i}"),
    }
}

pub fn component_file(d: Domain, c: Component) -> String {
    format!("{}_{}.json", domain_name(d), c.name())
}

/// Paths opened by a loader, in order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccessLog {
    pub opened: Vec<PathBuf>,
}

impl AccessLog {
    fn is(p: &Path, suffix: &str) -> bool {
        p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(suffix))
    }

    /// Encoder and generator files.
    pub fn generator_side(&self) -> usize {
        self.opened
            .iter()
            .filter(|p| Self::is(p, "_encoder.json") || Self::is(p, "_generator.json"))
            .count()
    }

    pub fn discriminators(&self) -> usize {
        self.opened.iter().filter(|p| Self::is(p, "_discriminator.json")).count()
    }
}

pub fn save(dir: &Path, bank: &ModelBank, manifest: &Manifest) -> Result<()> {
    if manifest.num_stains != bank.num_stains() || manifest.arch != bank.arch {
        return Err(Error::Contract("manifest does not describe this model bank".into()));
    }
    for (i, t) in bank.triples.iter().enumerate() {
        let d = Domain::from_index(i);
        for c in Component::ALL {
            if let Some(p) = t.params(c) {
                let f = ComponentFile { version: FORMAT_VERSION, domain: d, component: c, params: p.to_vec() };
                write_json(&dir.join(component_file(d, c)), &f)?;
            }
        }
    }
    write_json(&dir.join(MANIFEST), manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = read_json(&dir.join(MANIFEST))?;
    if m.version != FORMAT_VERSION {
        return Err(Error::Config(format!("checkpoint version {} (expected {FORMAT_VERSION})", m.version)));
    }
    if m.stains.len() != m.num_stains {
        return Err(Error::Config("manifest stain list does not match num_stains".into()));
    }
    m.arch.validate()?;
    Ok(m)
}

fn load_component(dir: &Path, bank: &mut ModelBank, d: Domain, c: Component, log: &mut AccessLog) -> Result<()> {
    let path = dir.join(component_file(d, c));
    log.opened.push(path.clone());
    let f: ComponentFile = read_json(&path)?;
    if f.domain != d || f.component != c {
        return Err(Error::Config(format!("{} holds {:?} {:?}", path.display(), f.domain, f.component)));
    }
    let arch = bank.arch;
    let t = bank.triple_mut(d)?;
    match c {
        Component::Encoder => t.encoder = Some(Network::from_params(arch.encoder_layers(), f.params)?),
        Component::Generator => t.generator = Some(Network::from_params(arch.generator_layers(), f.params)?),
        Component::Discriminator => t.discriminator = Some(Discriminator::from_params(arch.disc_spec(), f.params)?),
    }
    Ok(())
}

/// Inference loading: the H&E encoder, the generators of `stains`, and
/// their discriminators only when `with_qc`.
pub fn load_for_staining(dir: &Path, stains: &[usize], with_qc: bool, log: &mut AccessLog) -> Result<(Manifest, ModelBank)> {
    let m = load_manifest(dir)?;
    let mut bank = ModelBank::empty(m.arch, m.num_stains);
    load_component(dir, &mut bank, Domain::He, Component::Encoder, log)?;
    let mut seen = Vec::new();
    for &k in stains {
        if k == 0 || k > m.num_stains {
            return Err(Error::Range(format!("stain {k} not in 1..={}", m.num_stains)));
        }
        if seen.contains(&k) {
            continue;
        }
        seen.push(k);
        load_component(dir, &mut bank, Domain::Stain(k), Component::Generator, log)?;
        if with_qc {
            load_component(dir, &mut bank, Domain::Stain(k), Component::Discriminator, log)?;
        }
    }
    Ok((m, bank))
}

/// Every component, for resuming training or full evaluation.
pub fn load_all(dir: &Path, log: &mut AccessLog) -> Result<(Manifest, ModelBank)> {
    let m = load_manifest(dir)?;
    let mut bank = ModelBank::empty(m.arch, m.num_stains);
    for i in 0..=m.num_stains {
        for c in Component::ALL {
            load_component(dir, &mut bank, Domain::from_index(i), c, log)?;
        }
    }
    Ok((m, bank))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::Hsv;
    use crate::model::Init;
    use rand::SeedableRng;

    fn fixture(s: usize) -> (ModelBank, Manifest) {
        let arch = ArchSpec::default();
        let bank = ModelBank::new(arch, s, Init::default(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(1));
        let stains = (1..=s)
            .map(|k| StainConfig {
                stain_id: k,
                stain_name: format!("s{k}"),
                hsv_lo: Hsv::new(10.0, 0.5, 0.1),
                hsv_hi: Hsv::new(40.0, 1.0, 0.9),
            })
            .collect();
        let m = Manifest { version: FORMAT_VERSION, num_stains: s, arch, iteration: 7, stains, qc_interval: None };
        (bank, m)
    }

    #[test]
    fn full_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (bank, m) = fixture(2);
        save(dir.path(), &bank, &m).unwrap();
        let mut log = AccessLog::default();
        let (m2, b2) = load_all(dir.path(), &mut log).unwrap();
        assert_eq!((m2, b2), (m, bank));
        assert_eq!(log.opened.len(), 9);
    }

    #[test]
    fn staining_opens_only_needed_files() {
        let dir = tempfile::tempdir().unwrap();
        let (bank, m) = fixture(4);
        save(dir.path(), &bank, &m).unwrap();
        let mut log = AccessLog::default();
        let (_, b) = load_for_staining(dir.path(), &[2, 4], false, &mut log).unwrap();
        assert_eq!(log.generator_side(), 3);
        assert_eq!(log.discriminators(), 0);
        assert!(b.generator(Domain::Stain(1)).is_err());
        let mut log = AccessLog::default();
        load_for_staining(dir.path(), &[3], true, &mut log).unwrap();
        assert_eq!((log.generator_side(), log.discriminators()), (2, 1));
        assert!(matches!(load_for_staining(dir.path(), &[5], false, &mut AccessLog::default()), Err(Error::Range(_))));
    }
}
