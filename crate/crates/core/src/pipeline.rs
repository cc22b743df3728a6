//! Mode dispatch: synth, train, stain, qc and eval over a data directory
//! of pyramidal TIFF slides.
//!
//! Data layout: `specs.json` plus `{split}_{nnn}_he.tif` and
//! `{split}_{nnn}_{stain}.tif` for the `train` and `eval` splits.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{self, AccessLog, Manifest};
use crate::config::{Mode, RunConfig, StitchConfig};
use crate::error::{Error, Result};
use crate::io::{read_json, read_slide, write_json, write_png, write_pyramidal_tiff};
use crate::metrics::{aggregate, evaluate_wsi};
use crate::model::ModelBank;
use crate::qc::{anomaly_stats, calibrate_interval, confidence_map, render_heatmap, AnomalyStats, Verdict};
use crate::raster::Raster;
use crate::stain_mask::StainConfig;
use crate::stitch::{stitch_wsi, GridTile};
use crate::synth::{default_stain_specs, generate_synth_slides, SynthStainSpec};
use crate::train::{sample_batch, write_log_line, PairSet, Trainer};
use crate::wsi::{build_tile_grid, extract_tile, is_tissue_tile, GridOptions, Magnification, TileGrid, WsiImage};

pub const SPECS_FILE: &str = "specs.json";
pub const TRAIN_LOG: &str = "train_log.jsonl";
/// Tiles per stain used to calibrate the QC interval after training.
const QC_CALIBRATION_TILES: usize = 64;

/// What a run produced: files written and a JSON summary for stdout.
#[derive(Clone, Debug, Serialize)]
pub struct Outcome {
    pub mode: Mode,
    pub outputs: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

pub fn run(mode: Mode, cfg: &RunConfig) -> Result<Outcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.paths.out).map_err(|e| Error::io(&cfg.paths.out, e))?;
    match mode {
        Mode::Synth => synth(cfg),
        Mode::Train => train(cfg),
        Mode::Stain => stain(cfg, cfg.stain.qc, Mode::Stain),
        Mode::Qc => stain(cfg, true, Mode::Qc),
        Mode::Eval => eval(cfg),
    }
}

fn slide_seed(seed: u64, split: u64, n: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (split << 40) ^ n as u64
}

pub fn slide_path(dir: &Path, split: &str, n: usize, stain: &str) -> PathBuf {
    dir.join(format!("{split}_{n:03}_{stain}.tif"))
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn synth(cfg: &RunConfig) -> Result<Outcome> {
    let dir = cfg.paths.data_dir();
    mkdir(&dir)?;
    let specs = default_stain_specs(cfg.synth.num_stains)?;
    let s = &cfg.synth;
    let jobs: Vec<(&str, u64, usize)> = (0..s.slides)
        .map(|n| ("train", 0, n))
        .chain((0..s.eval_slides).map(|n| ("eval", 1, n)))
        .collect();
    let written = jobs
        .par_iter()
        .map(|&(split, tag, n)| {
            let set = generate_synth_slides(&specs, s.width, s.height, slide_seed(cfg.seed, tag, n))?;
            let mut out = vec![slide_path(&dir, split, n, "he")];
            write_pyramidal_tiff(&out[0], &set.he)?;
            for (spec, img) in &set.stains {
                let p = slide_path(&dir, split, n, &spec.name);
                write_pyramidal_tiff(&p, img)?;
                out.push(p);
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let specs_path = dir.join(SPECS_FILE);
    write_json(&specs_path, &specs)?;
    let mut outputs: Vec<PathBuf> = written.into_iter().flatten().collect();
    outputs.push(specs_path);
    let summary = json!({
        "data_dir": dir,
        "stains": specs.iter().map(|s| &s.name).collect::<Vec<_>>(),
        "train_slides": s.slides,
        "eval_slides": s.eval_slides,
        "size": [s.width, s.height],
    });
    Ok(Outcome { mode: Mode::Synth, outputs, summary })
}

/// Bands for training: explicit config, else `specs.json` in the data
/// directory, else the synthetic defaults.
fn training_stains(cfg: &RunConfig, dir: &Path) -> Result<Vec<StainConfig>> {
    if !cfg.stains.is_empty() {
        return Ok(cfg.stains.clone());
    }
    let path = dir.join(SPECS_FILE);
    if path.exists() {
        let specs: Vec<SynthStainSpec> = read_json(&path)?;
        if specs.len() < cfg.train.num_stains {
            return Err(Error::Config(format!(
                "{} lists {} stains, train.num_stains = {}",
                path.display(),
                specs.len(),
                cfg.train.num_stains
            )));
        }
        return Ok(specs[..cfg.train.num_stains].iter().map(|s| s.stain_config()).collect());
    }
    cfg.stain_configs()
}

/// Indices `n` with an existing `{split}_{n}_he.tif`, in order.
fn split_indices(dir: &Path, split: &str) -> Result<Vec<usize>> {
    let prefix = format!("{split}_");
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name();
        let name = name.to_string_lossy();
        if let Some(n) = name.strip_prefix(&prefix).and_then(|r| r.strip_suffix("_he.tif")) {
            if let Ok(n) = n.parse() {
                out.push(n);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Non-overlapping training tiles of aligned slides, tissue tiles only.
fn training_tiles(he: &WsiImage, stains: &[WsiImage], tile: usize, min_tissue: f64) -> Result<(Vec<Raster>, Vec<Vec<Raster>>)> {
    let grid = build_tile_grid(he, &GridOptions::new(tile, 0.0, Magnification::X40))?;
    let mut he_tiles = Vec::new();
    let mut st_tiles = vec![Vec::new(); stains.len()];
    for (gx, gy) in grid.indices() {
        let t = extract_tile(he, &grid, gx, gy)?;
        if !is_tissue_tile(&t, min_tissue) {
            continue;
        }
        for (k, s) in stains.iter().enumerate() {
            st_tiles[k].push(extract_tile(s, &grid, gx, gy)?.pixels);
        }
        he_tiles.push(t.pixels);
    }
    Ok((he_tiles, st_tiles))
}

fn train(cfg: &RunConfig) -> Result<Outcome> {
    let dir = cfg.paths.data_dir();
    let stains = training_stains(cfg, &dir)?;
    let ids = split_indices(&dir, "train")?;
    if ids.is_empty() {
        return Err(Error::Config(format!("no train_*_he.tif slides in {}", dir.display())));
    }
    let mut he_all = Vec::new();
    let mut st_all = vec![Vec::new(); stains.len()];
    for &n in &ids {
        let he = read_slide(&slide_path(&dir, "train", n, "he"))?;
        let st = stains
            .iter()
            .map(|s| read_slide(&slide_path(&dir, "train", n, &s.stain_name)))
            .collect::<Result<Vec<_>>>()?;
        let (h, s) = training_tiles(&he, &st, cfg.schedule.tile_size, cfg.schedule.min_tissue)?;
        he_all.extend(h);
        for (acc, t) in st_all.iter_mut().zip(s) {
            acc.extend(t);
        }
    }
    if he_all.is_empty() {
        return Err(Error::Config("no tissue tiles to train on".into()));
    }
    let sets = stains
        .iter()
        .zip(st_all)
        .map(|(s, tiles)| PairSet::new(s, he_all.clone(), tiles))
        .collect::<Result<Vec<_>>>()?;

    let mut tcfg = cfg.train.clone();
    tcfg.rng_seed = cfg.seed;
    let mut trainer = Trainer::new(tcfg.clone())?;
    let log_path = cfg.paths.out.join(TRAIN_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut last = Vec::new();
    for it in 0..cfg.schedule.iterations {
        let batch = sample_batch(&sets, tcfg.batch_size, tcfg.paired, trainer.rng());
        last = trainer.train_iteration(&batch)?;
        if (it + 1) % cfg.schedule.log_every == 0 || it + 1 == cfg.schedule.iterations {
            for r in &last {
                write_log_line(&mut log, r)?;
            }
        }
    }
    drop(log);

    let interval = calibrate(&trainer.bank, &sets, cfg)?;
    let manifest = Manifest {
        version: checkpoint::FORMAT_VERSION,
        num_stains: stains.len(),
        arch: tcfg.arch,
        iteration: trainer.iteration,
        stains: stains.clone(),
        qc_interval: Some(interval),
    };
    let model_dir = cfg.paths.model_dir();
    mkdir(&model_dir)?;
    checkpoint::save(&model_dir, &trainer.bank, &manifest)?;
    let summary = json!({
        "model_dir": model_dir,
        "iterations": trainer.iteration,
        "tiles": he_all.len(),
        "qc_interval": interval,
        "final_losses": last,
    });
    Ok(Outcome { mode: Mode::Train, outputs: vec![model_dir, log_path], summary })
}

/// Normal std range of the confidence maps of generated training tiles.
fn calibrate(bank: &ModelBank, sets: &[PairSet], cfg: &RunConfig) -> Result<(f64, f64)> {
    let maps = sets
        .par_iter()
        .flat_map_iter(|s| s.he.iter().take(QC_CALIBRATION_TILES).map(move |t| (s.stain, t)))
        .map(|(k, t)| {
            let fake = bank.translate(t, k)?;
            confidence_map(bank.discriminator(crate::model::Domain::Stain(k))?, &fake)
        })
        .collect::<Result<Vec<_>>>()?;
    calibrate_interval(&maps, cfg.qc.lo_percentile, cfg.qc.hi_percentile)
}

/// Generated tiles of one slide for one stain, in grid order.
pub fn generate_tiles(bank: &ModelBank, he: &WsiImage, grid: &TileGrid, stain: usize) -> Result<Vec<GridTile>> {
    let idx: Vec<_> = grid.indices().collect();
    idx.par_iter()
        .map(|&(gx, gy)| {
            let t = extract_tile(he, grid, gx, gy)?;
            Ok(GridTile { grid_x: gx, grid_y: gy, pixels: bank.translate(&t.pixels, stain)? })
        })
        .collect()
}

pub fn slide_grid(he: &WsiImage, st: &StitchConfig) -> Result<TileGrid> {
    build_tile_grid(he, &GridOptions::new(st.tile_size, st.overlap, st.magnification))
}

fn stitch_generated(tiles: Vec<GridTile>, grid: &TileGrid, st: &StitchConfig, mpp: f64) -> Result<WsiImage> {
    stitch_wsi(tiles.into_iter().map(Ok), grid, st.overlap, mpp, 64)
}

fn requested_stains(cfg: &RunConfig, m: &Manifest) -> Result<Vec<(usize, String)>> {
    if cfg.stain.stains.is_empty() {
        return Ok(m.stains.iter().map(|s| (s.stain_id, s.stain_name.clone())).collect());
    }
    cfg.stain.stains.iter().map(|n| Ok((m.stain_id(n)?, n.clone()))).collect()
}

fn stain_inputs(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    if !cfg.paths.inputs.is_empty() {
        return Ok(cfg.paths.inputs.clone());
    }
    let dir = cfg.paths.data_dir();
    let mut out = Vec::new();
    for split in ["train", "eval"] {
        out.extend(split_indices(&dir, split)?.into_iter().map(|n| slide_path(&dir, split, n, "he")));
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no input slides given and none in {}", dir.display())));
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
struct TileQc {
    grid_x: usize,
    grid_y: usize,
    stats: AnomalyStats,
}

fn stem(p: &Path) -> String {
    let s = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    s.strip_suffix("_he").map(str::to_string).unwrap_or(s)
}

fn stain(cfg: &RunConfig, qc: bool, mode: Mode) -> Result<Outcome> {
    let model_dir = cfg.paths.model_dir();
    let manifest = checkpoint::load_manifest(&model_dir)?;
    let wanted = requested_stains(cfg, &manifest)?;
    let ids: Vec<usize> = wanted.iter().map(|(k, _)| *k).collect();
    let mut log = AccessLog::default();
    let (manifest, bank) = checkpoint::load_for_staining(&model_dir, &ids, qc, &mut log)?;
    let interval = match (qc, manifest.qc_interval) {
        (true, None) => return Err(Error::State("checkpoint has no calibrated QC interval".into())),
        (_, i) => i,
    };
    let stained_dir = cfg.paths.out.join("stained");
    let qc_dir = cfg.paths.out.join("qc");
    mkdir(&stained_dir)?;
    if qc {
        mkdir(&qc_dir)?;
    }
    let mut outputs = Vec::new();
    let mut slides = Vec::new();
    for input in stain_inputs(cfg)? {
        let he = read_slide(&input)?;
        let grid = slide_grid(&he, &cfg.stitch)?;
        let name = stem(&input);
        for (k, sname) in &wanted {
            let tiles = generate_tiles(&bank, &he, &grid, *k)?;
            let mut entry = json!({ "input": input, "stain": sname });
            if let Some(interval) = interval.filter(|_| qc) {
                let (report, heat) = qc_tiles(&bank, &tiles, &grid, &cfg.stitch, *k, interval, he.microns_per_pixel())?;
                let rp = qc_dir.join(format!("{name}_{sname}_qc.json"));
                write_json(&rp, &report)?;
                outputs.push(rp);
                if cfg.qc.heatmaps {
                    let hp = qc_dir.join(format!("{name}_{sname}_heatmap.png"));
                    write_png(&hp, heat.base())?;
                    outputs.push(hp);
                }
                entry["qc"] = verdict_counts(&report);
            }
            let out = stitch_generated(tiles, &grid, &cfg.stitch, he.microns_per_pixel())?;
            let p = stained_dir.join(format!("{name}_{sname}.tif"));
            write_pyramidal_tiff(&p, &out)?;
            entry["output"] = json!(p);
            outputs.push(p);
            slides.push(entry);
        }
    }
    let summary = json!({
        "stains": wanted.iter().map(|(_, n)| n).collect::<Vec<_>>(),
        "files_opened": log.opened,
        "generator_side_files": log.generator_side(),
        "discriminator_files": log.discriminators(),
        "slides": slides,
    });
    let rp = cfg.paths.out.join(format!("{}_report.json", if mode == Mode::Qc { "qc" } else { "stain" }));
    write_json(&rp, &summary)?;
    outputs.push(rp);
    Ok(Outcome { mode, outputs, summary })
}

fn qc_tiles(
    bank: &ModelBank,
    tiles: &[GridTile],
    grid: &TileGrid,
    st: &StitchConfig,
    stain: usize,
    interval: (f64, f64),
    mpp: f64,
) -> Result<(Vec<TileQc>, WsiImage)> {
    let d = bank.discriminator(crate::model::Domain::Stain(stain))?;
    let per: Vec<(TileQc, GridTile)> = tiles
        .par_iter()
        .map(|t| {
            let map = confidence_map(d, &t.pixels)?;
            let heat = render_heatmap(&map, Some(&t.pixels))?;
            Ok((
                TileQc { grid_x: t.grid_x, grid_y: t.grid_y, stats: anomaly_stats(&map, interval) },
                GridTile { grid_x: t.grid_x, grid_y: t.grid_y, pixels: heat.rgb },
            ))
        })
        .collect::<Result<_>>()?;
    let (report, heat): (Vec<_>, Vec<_>) = per.into_iter().unzip();
    Ok((report, stitch_generated(heat, grid, st, mpp)?))
}

fn verdict_counts(report: &[TileQc]) -> serde_json::Value {
    let count = |v: Verdict| report.iter().filter(|t| t.stats.verdict == v).count();
    json!({
        "authentic": count(Verdict::Authentic),
        "outlier_low": count(Verdict::OutlierLow),
        "outlier_high": count(Verdict::OutlierHigh),
    })
}

fn eval(cfg: &RunConfig) -> Result<Outcome> {
    let dir = cfg.paths.data_dir();
    let model_dir = cfg.paths.model_dir();
    let manifest = checkpoint::load_manifest(&model_dir)?;
    let wanted = requested_stains(cfg, &manifest)?;
    let ids: Vec<usize> = wanted.iter().map(|(k, _)| *k).collect();
    let (_, bank) = checkpoint::load_for_staining(&model_dir, &ids, false, &mut AccessLog::default())?;
    let slides = split_indices(&dir, "eval")?;
    if slides.is_empty() {
        return Err(Error::Config(format!("no eval_*_he.tif slides in {}", dir.display())));
    }
    let mut per_stain: Vec<(String, Vec<_>)> = wanted.iter().map(|(_, n)| (n.clone(), Vec::new())).collect();
    for &n in &slides {
        let he = read_slide(&slide_path(&dir, "eval", n, "he"))?;
        let grid = slide_grid(&he, &cfg.stitch)?;
        for ((k, sname), (_, acc)) in wanted.iter().zip(per_stain.iter_mut()) {
            let truth = read_slide(&slide_path(&dir, "eval", n, sname))?;
            let tiles = generate_tiles(&bank, &he, &grid, *k)?;
            let pred = stitch_generated(tiles, &grid, &cfg.stitch, he.microns_per_pixel())?;
            acc.push(evaluate_wsi(&pred, &truth, &he)?);
        }
    }
    let report = aggregate(per_stain);
    let rp = cfg.paths.out.join("eval_report.json");
    write_json(&rp, &report)?;
    let summary = serde_json::to_value(&report)?;
    Ok(Outcome { mode: Mode::Eval, outputs: vec![rp], summary })
}
