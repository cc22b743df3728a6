//! Whole-slide images as resolution pyramids, tile grids and tissue detection.

use serde::{Deserialize, Serialize};

use crate::color::rgb_to_hsv_unchecked;
use crate::error::{Error, Result};
use crate::raster::{BitPlane, Raster};

/// Level-0 sampling of the scanner used throughout the fixtures.
pub const DEFAULT_MPP: f64 = 0.22;

/// Level at which tissue detection runs for tile selection.
pub const FOREGROUND_LEVEL: usize = 2;

/// An RGB slide stored as a pyramid; level 0 is full resolution (40x).
#[derive(Clone, Debug, PartialEq)]
pub struct WsiImage {
    levels: Vec<Raster>,
    microns_per_pixel: f64,
}

impl WsiImage {
    /// Wrap an explicit list of levels. Each level must be no larger than
    /// the previous one and carry three channels.
    pub fn from_levels(levels: Vec<Raster>, microns_per_pixel: f64) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Shape("slide without levels".into()));
        }
        for (k, l) in levels.iter().enumerate() {
            if l.channels() != 3 {
                return Err(Error::Shape(format!("level {k} has {} channels", l.channels())));
            }
            if k > 0 {
                let p = &levels[k - 1];
                if l.width() > p.width() || l.height() > p.height() {
                    return Err(Error::Shape(format!("level {k} is larger than level {}", k - 1)));
                }
            }
        }
        Ok(Self {
            levels,
            microns_per_pixel,
        })
    }

    /// Build a pyramid from a level-0 raster by repeated 2x box filtering
    /// until the smaller side drops to `min_side` or below.
    pub fn from_base(base: Raster, microns_per_pixel: f64, min_side: usize) -> Result<Self> {
        let mut levels = vec![base];
        loop {
            let last = levels.last().unwrap();
            if last.width().min(last.height()) <= min_side.max(1) {
                break;
            }
            let next = last.downsample2();
            levels.push(next);
        }
        Self::from_levels(levels, microns_per_pixel)
    }

    /// Pyramid with exactly `n_levels` levels.
    pub fn with_levels(base: Raster, microns_per_pixel: f64, n_levels: usize) -> Result<Self> {
        let mut levels = vec![base];
        while levels.len() < n_levels.max(1) {
            let next = levels.last().unwrap().downsample2();
            levels.push(next);
        }
        Self::from_levels(levels, microns_per_pixel)
    }

    pub fn single(base: Raster) -> Result<Self> {
        Self::from_levels(vec![base], DEFAULT_MPP)
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, k: usize) -> Result<&Raster> {
        self.levels
            .get(k)
            .ok_or_else(|| Error::Range(format!("level {k} of {}", self.levels.len())))
    }

    pub fn base(&self) -> &Raster {
        &self.levels[0]
    }

    pub fn levels(&self) -> &[Raster] {
        &self.levels
    }

    pub fn width(&self) -> usize {
        self.levels[0].width()
    }

    pub fn height(&self) -> usize {
        self.levels[0].height()
    }

    pub fn microns_per_pixel(&self) -> f64 {
        self.microns_per_pixel
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Magnification {
    #[serde(rename = "x10")]
    X10,
    #[serde(rename = "x20")]
    X20,
    #[serde(rename = "x40")]
    X40,
}

impl Magnification {
    /// Pyramid level holding this magnification for a 40x scan.
    pub fn level(self) -> usize {
        match self {
            Magnification::X40 => 0,
            Magnification::X20 => 1,
            Magnification::X10 => 2,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "x10" | "10x" | "10" => Ok(Magnification::X10),
            "x20" | "20x" | "20" => Ok(Magnification::X20),
            "x40" | "40x" | "40" => Ok(Magnification::X40),
            other => Err(Error::Config(format!("unknown magnification {other:?}"))),
        }
    }
}

/// Tissue detector thresholds: tissue iff saturation >= `s_min` or value <= `v_max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForegroundRule {
    pub s_min: f64,
    pub v_max: f64,
}

impl Default for ForegroundRule {
    fn default() -> Self {
        Self {
            s_min: 0.07,
            v_max: 0.85,
        }
    }
}

impl ForegroundRule {
    #[inline]
    pub fn is_tissue(&self, rgb: [f64; 3]) -> bool {
        let hsv = rgb_to_hsv_unchecked(rgb);
        hsv.s >= self.s_min || hsv.v <= self.v_max
    }

    pub fn plane(&self, raster: &Raster) -> BitPlane {
        BitPlane::from_fn(raster.width(), raster.height(), |x, y| {
            let p = raster.pixel(x, y);
            self.is_tissue([p[0], p[1], p[2]])
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundMask {
    pub plane: BitPlane,
    pub tissue_fraction: f64,
}

impl ForegroundMask {
    pub fn from_plane(plane: BitPlane) -> Self {
        let tissue_fraction = plane.fraction();
        Self {
            plane,
            tissue_fraction,
        }
    }
}

/// Tissue mask of one pyramid level with the default thresholds.
pub fn foreground_mask(image: &WsiImage, level: usize) -> Result<ForegroundMask> {
    foreground_mask_with(image, level, &ForegroundRule::default())
}

pub fn foreground_mask_with(
    image: &WsiImage,
    level: usize,
    rule: &ForegroundRule,
) -> Result<ForegroundMask> {
    let raster = image.level(level)?;
    Ok(ForegroundMask::from_plane(rule.plane(raster)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    pub tile_size: usize,
    pub overlap_fraction: f64,
    pub magnification: Magnification,
    /// Shift trailing tiles inward so they end on the image boundary.
    pub clamp: bool,
    pub origin_x: usize,
    pub origin_y: usize,
    /// Resample extracted tiles to this side length (training resolution).
    pub output_size: Option<usize>,
}

impl GridOptions {
    pub fn new(tile_size: usize, overlap_fraction: f64, magnification: Magnification) -> Self {
        Self {
            tile_size,
            overlap_fraction,
            magnification,
            clamp: true,
            origin_x: 0,
            origin_y: 0,
            output_size: None,
        }
    }
}

/// Tile positions over one pyramid level. Positions are level coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileGrid {
    pub tile_size: usize,
    pub overlap_fraction: f64,
    pub magnification: Magnification,
    pub stride: usize,
    pub origin_x: usize,
    pub origin_y: usize,
    pub level_width: usize,
    pub level_height: usize,
    pub output_size: Option<usize>,
    xs: Vec<usize>,
    ys: Vec<usize>,
}

impl TileGrid {
    pub fn columns(&self) -> usize {
        self.xs.len()
    }

    pub fn rows(&self) -> usize {
        self.ys.len()
    }

    pub fn len(&self) -> usize {
        self.xs.len() * self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn xs(&self) -> &[usize] {
        &self.xs
    }

    pub fn ys(&self) -> &[usize] {
        &self.ys
    }

    pub fn level(&self) -> usize {
        self.magnification.level()
    }

    /// Top-left corner of tile `(gx, gy)` in level coordinates.
    pub fn position(&self, gx: usize, gy: usize) -> Result<(usize, usize)> {
        match (self.xs.get(gx), self.ys.get(gy)) {
            (Some(&x), Some(&y)) => Ok((x, y)),
            _ => Err(Error::Range(format!(
                "tile ({gx}, {gy}) outside {}x{} grid",
                self.columns(),
                self.rows()
            ))),
        }
    }

    /// Row-major iteration over `(gx, gy)`.
    pub fn indices(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.rows()).flat_map(move |gy| (0..self.columns()).map(move |gx| (gx, gy)))
    }
}

/// `round(tile * (1 - overlap))`, never below one pixel.
pub fn stride_for(tile_size: usize, overlap_fraction: f64) -> usize {
    ((tile_size as f64 * (1.0 - overlap_fraction)).round() as usize).max(1)
}

fn axis_positions(extent: usize, tile: usize, stride: usize, clamp: bool) -> Vec<usize> {
    if extent <= tile {
        return vec![0];
    }
    let n = (extent - tile).div_ceil(stride) + 1;
    (0..n)
        .map(|k| {
            let p = k * stride;
            if clamp {
                p.min(extent - tile)
            } else {
                p
            }
        })
        .collect()
}

pub fn build_tile_grid(image: &WsiImage, opts: &GridOptions) -> Result<TileGrid> {
    if opts.tile_size < 8 {
        return Err(Error::Config(format!("tile size {} < 8", opts.tile_size)));
    }
    if !(0.0..1.0).contains(&opts.overlap_fraction) {
        return Err(Error::Config(format!(
            "overlap fraction {} outside [0, 1)",
            opts.overlap_fraction
        )));
    }
    let level = image.level(opts.magnification.level())?;
    let (w, h) = (level.width(), level.height());
    if opts.origin_x >= w || opts.origin_y >= h {
        return Err(Error::Config(format!(
            "grid origin ({}, {}) outside {w}x{h} level",
            opts.origin_x, opts.origin_y
        )));
    }
    let (ew, eh) = (w - opts.origin_x, h - opts.origin_y);
    if !opts.clamp && opts.tile_size > ew && opts.tile_size > eh {
        return Err(Error::Config(format!(
            "tile {} exceeds {ew}x{eh} region with clamping disabled",
            opts.tile_size
        )));
    }
    let stride = stride_for(opts.tile_size, opts.overlap_fraction);
    let xs = axis_positions(ew, opts.tile_size, stride, opts.clamp)
        .into_iter()
        .map(|p| p + opts.origin_x)
        .collect();
    let ys = axis_positions(eh, opts.tile_size, stride, opts.clamp)
        .into_iter()
        .map(|p| p + opts.origin_y)
        .collect();
    Ok(TileGrid {
        tile_size: opts.tile_size,
        overlap_fraction: opts.overlap_fraction,
        magnification: opts.magnification,
        stride,
        origin_x: opts.origin_x,
        origin_y: opts.origin_y,
        level_width: w,
        level_height: h,
        output_size: opts.output_size,
        xs,
        ys,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub grid_x: usize,
    pub grid_y: usize,
    /// Top-left corner in level-0 coordinates.
    pub pixel_x: usize,
    pub pixel_y: usize,
    pub pixels: Raster,
    pub tissue_fraction: f64,
}

impl Tile {
    /// Wrap a free-standing raster (grid position 0, 0).
    pub fn from_raster(pixels: Raster) -> Self {
        let tissue_fraction = ForegroundRule::default().plane(&pixels).fraction();
        Self {
            grid_x: 0,
            grid_y: 0,
            pixel_x: 0,
            pixel_y: 0,
            pixels,
            tissue_fraction,
        }
    }
}

/// Copy tile `(gx, gy)` out of the grid's level. Samples past the image edge
/// (only possible for images smaller than a tile, or unclamped grids)
/// replicate the border.
pub fn extract_tile(image: &WsiImage, grid: &TileGrid, gx: usize, gy: usize) -> Result<Tile> {
    let (x, y) = grid.position(gx, gy)?;
    let level = image.level(grid.level())?;
    let mut pixels = level.crop_clamped(x as isize, y as isize, grid.tile_size, grid.tile_size);
    if let Some(out) = grid.output_size {
        if out != grid.tile_size {
            pixels = pixels.resize_bilinear(out, out);
        }
    }
    let scale = 1usize << grid.level();
    let tissue_fraction = ForegroundRule::default().plane(&pixels).fraction();
    Ok(Tile {
        grid_x: gx,
        grid_y: gy,
        pixel_x: x * scale,
        pixel_y: y * scale,
        pixels,
        tissue_fraction,
    })
}

/// Inclusive tissue threshold.
pub fn is_tissue_tile(tile: &Tile, min_tissue: f64) -> bool {
    tile.tissue_fraction >= min_tissue
}
