//! Overlap-add reconstruction of a slide from generated tiles, weighting
//! each tile by a separable 2-D Hamming window.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::wsi::{TileGrid, WsiImage};

/// Symmetric Hamming taps `0.54 - 0.46 cos(2 pi n / (M - 1))`.
pub fn hamming_1d(m: usize) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(Error::Domain(format!("Hamming window needs M >= 2, got {m}")));
    }
    let d = (m - 1) as f64;
    Ok((0..m).map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / d).cos()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HammingWindow2D {
    pub size: usize,
    /// Single-channel `M x M` plane.
    pub plane: Raster,
}

/// Outer product of the 1-D window with itself.
pub fn hamming_2d(m: usize) -> Result<HammingWindow2D> {
    let w = hamming_1d(m)?;
    Ok(HammingWindow2D {
        size: m,
        plane: Raster::from_fn(m, m, 1, |x, y, _| w[x] * w[y]),
    })
}

pub fn apply_window(patch: &Raster, window: &HammingWindow2D) -> Result<Raster> {
    if patch.width() != window.size || patch.height() != window.size {
        return Err(Error::Shape(format!(
            "patch {}x{} vs window {}",
            patch.width(),
            patch.height(),
            window.size
        )));
    }
    let ch = patch.channels();
    let wd = window.plane.data();
    let data = patch.data().iter().enumerate().map(|(i, &v)| v * wd[i / ch]).collect();
    Raster::from_vec(patch.width(), patch.height(), ch, data)
}

/// Weighted sums over a horizontal band `[y0, y0 + height)` of a slide of
/// width `width`. A whole-image accumulator is a band with `y0 = 0`.
#[derive(Clone, Debug)]
pub struct StitchAccumulator {
    pub width: usize,
    pub y0: usize,
    pub height: usize,
    pub value: Raster,
    pub weight: Raster,
}

impl StitchAccumulator {
    pub fn new(width: usize, height: usize) -> Self {
        Self::band(width, 0, height)
    }

    pub fn band(width: usize, y0: usize, height: usize) -> Self {
        Self {
            width,
            y0,
            height,
            value: Raster::zeros(width, height, 3),
            weight: Raster::zeros(width, height, 1),
        }
    }

    /// Add `patch` with its top-left corner at slide pixel `(px, py)`.
    /// `window = None` is plain placement with unit weight.
    pub fn accumulate(&mut self, patch: &Raster, window: Option<&HammingWindow2D>, px: usize, py: usize) -> Result<()> {
        let (w, h) = (patch.width(), patch.height());
        if patch.channels() != 3 {
            return Err(Error::Shape(format!("patch has {} channels", patch.channels())));
        }
        if let Some(win) = window {
            if win.size != w || win.size != h {
                return Err(Error::Shape(format!("patch {w}x{h} vs window {}", win.size)));
            }
        }
        if px + w > self.width || py < self.y0 || py + h > self.y0 + self.height {
            return Err(Error::Range(format!(
                "patch {w}x{h} at ({px}, {py}) outside accumulator {}x[{}, {})",
                self.width,
                self.y0,
                self.y0 + self.height
            )));
        }
        self.add_region(patch, window, px, py, 0, 0, w, h);
        Ok(())
    }

    /// Add the `cw x ch` sub-rectangle of `patch` starting at `(sx, sy)`.
    #[allow(clippy::too_many_arguments)]
    fn add_region(
        &mut self,
        patch: &Raster,
        window: Option<&HammingWindow2D>,
        px: usize,
        py: usize,
        sx: usize,
        sy: usize,
        cw: usize,
        chh: usize,
    ) {
        for y in sy..sy + chh {
            let ay = py + (y - sy) - self.y0;
            for x in sx..sx + cw {
                let ax = px + (x - sx);
                let wv = window.map_or(1.0, |win| win.plane.get(x, y, 0));
                let src = patch.pixel(x, y);
                let dst = self.value.pixel_mut(ax, ay);
                for c in 0..3 {
                    dst[c] += src[c] * wv;
                }
                let wi = self.weight.index(ax, ay, 0);
                self.weight.data_mut()[wi] += wv;
            }
        }
    }

    /// Normalize rows `[0, rows)` of the band into an RGB raster clamped to
    /// `[0, 1]`.
    fn normalize_rows(&self, rows: usize) -> Result<Raster> {
        let mut out = Raster::zeros(self.width, rows, 3);
        for y in 0..rows {
            for x in 0..self.width {
                let wv = self.weight.get(x, y, 0);
                if wv <= 0.0 {
                    return Err(Error::Coverage { x, y: y + self.y0 });
                }
                let v = self.value.pixel(x, y);
                let o = out.pixel_mut(x, y);
                for c in 0..3 {
                    o[c] = (v[c] / wv).clamp(0.0, 1.0);
                }
            }
        }
        Ok(out)
    }

    pub fn finalize(&self) -> Result<Raster> {
        self.normalize_rows(self.height)
    }

    /// Drop the first `rows` rows and extend the band by as many at the bottom.
    fn advance(&mut self, rows: usize) {
        let keep = self.height - rows;
        let shift = |r: &Raster| {
            let ch = r.channels();
            let mut n = Raster::zeros(self.width, self.height, ch);
            let off = rows * self.width * ch;
            n.data_mut()[..keep * self.width * ch].copy_from_slice(&r.data()[off..]);
            n
        };
        self.value = shift(&self.value);
        self.weight = shift(&self.weight);
        self.y0 += rows;
    }
}

/// One generated tile, identified by its grid index.
#[derive(Clone, Debug)]
pub struct GridTile {
    pub grid_x: usize,
    pub grid_y: usize,
    pub pixels: Raster,
}

fn check_overlap(grid: &TileGrid, overlap: f64) -> Result<()> {
    if (grid.overlap_fraction - overlap).abs() > 1e-12 {
        return Err(Error::Contract(format!(
            "stream overlap {overlap} differs from grid overlap {}",
            grid.overlap_fraction
        )));
    }
    Ok(())
}

/// Clip the tile at `(px, py)` against a `w x h` output and accumulate it.
fn place(acc: &mut StitchAccumulator, pixels: &Raster, window: Option<&HammingWindow2D>, px: usize, py: usize, w: usize, h: usize) {
    let cw = pixels.width().min(w.saturating_sub(px));
    let chh = pixels.height().min(h.saturating_sub(py));
    acc.add_region(pixels, window, px, py, 0, 0, cw, chh);
}

fn prepare(grid: &TileGrid, t: &GridTile) -> Result<(usize, usize, Raster)> {
    let (x, y) = grid.position(t.grid_x, t.grid_y)?;
    let pixels = if t.pixels.width() != grid.tile_size || t.pixels.height() != grid.tile_size {
        t.pixels.resize_bilinear(grid.tile_size, grid.tile_size)
    } else {
        t.pixels.clone()
    };
    Ok((x - grid.origin_x, y - grid.origin_y, pixels))
}

fn grid_window(grid: &TileGrid) -> Result<Option<HammingWindow2D>> {
    if grid.overlap_fraction > 0.0 {
        Ok(Some(hamming_2d(grid.tile_size)?))
    } else {
        Ok(None)
    }
}

fn output_dims(grid: &TileGrid) -> (usize, usize) {
    (grid.level_width - grid.origin_x, grid.level_height - grid.origin_y)
}

/// Whole-image accumulation; tiles may arrive in any order.
pub fn stitch_tiles(tiles: &[GridTile], grid: &TileGrid, overlap: f64) -> Result<Raster> {
    check_overlap(grid, overlap)?;
    let window = grid_window(grid)?;
    let (w, h) = output_dims(grid);
    let mut acc = StitchAccumulator::new(w, h);
    for t in tiles {
        let (px, py, pixels) = prepare(grid, t)?;
        place(&mut acc, &pixels, window.as_ref(), px, py, w, h);
    }
    acc.finalize()
}

/// Streaming stitch: tiles must arrive in row-major grid order and only a
/// band of roughly two tile rows is accumulated at a time. The result is
/// bit-identical to [`stitch_tiles`]. Returns the stitched region plus
/// 2x pyramid levels down to `min_side`.
pub fn stitch_wsi(
    tiles: impl IntoIterator<Item = Result<GridTile>>,
    grid: &TileGrid,
    overlap: f64,
    microns_per_pixel: f64,
    min_side: usize,
) -> Result<WsiImage> {
    check_overlap(grid, overlap)?;
    let window = grid_window(grid)?;
    let (w, h) = output_dims(grid);
    let ts = grid.tile_size;
    let band_h = (ts + grid.stride).min(h).max(1);
    let mut acc = StitchAccumulator::band(w, 0, band_h);
    let mut out = Raster::zeros(w, h, 3);
    let mut expected = grid.indices();
    let mut written = 0usize;

    let flush_until = |acc: &mut StitchAccumulator, out: &mut Raster, written: &mut usize, limit: usize| -> Result<()> {
        let limit = limit.min(h);
        if limit <= *written {
            return Ok(());
        }
        let rows = limit - *written;
        let part = acc.normalize_rows(rows)?;
        out.paste(&part, 0, *written)?;
        *written = limit;
        acc.advance(rows);
        Ok(())
    };

    for t in tiles {
        let t = t?;
        let want = expected.next();
        if want != Some((t.grid_x, t.grid_y)) {
            return match want {
                Some(_) => Err(Error::Contract(format!(
                    "tile ({}, {}) out of row-major order, expected {want:?}",
                    t.grid_x, t.grid_y
                ))),
                None => Err(Error::Contract(format!("extra tile ({}, {})", t.grid_x, t.grid_y))),
            };
        }
        let (px, py, pixels) = prepare(grid, &t)?;
        // rows above this tile row receive no further contributions
        flush_until(&mut acc, &mut out, &mut written, py)?;
        let end = (py + ts).min(h);
        if end > acc.y0 + acc.height {
            let need = end - acc.y0;
            let mut bigger = StitchAccumulator::band(w, acc.y0, need);
            bigger.value.data_mut()[..acc.value.len()].copy_from_slice(acc.value.data());
            bigger.weight.data_mut()[..acc.weight.len()].copy_from_slice(acc.weight.data());
            acc = bigger;
        }
        place(&mut acc, &pixels, window.as_ref(), px, py, w, h);
    }
    if let Some((gx, gy)) = expected.next() {
        let (x, y) = grid.position(gx, gy)?;
        return Err(Error::Coverage { x, y });
    }
    flush_until(&mut acc, &mut out, &mut written, h)?;
    WsiImage::from_base(out, microns_per_pixel, min_side)
}
