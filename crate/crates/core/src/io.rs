//! Raster files: PNG through `image`, TIFF reading through `tiff`, and a
//! small writer for tiled pyramidal TIFF.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use image::ImageEncoder;
use tiff::decoder::{Decoder, DecodingResult};
use tiff::tags::Tag;
use tiff::ColorType;

use crate::error::{Error, Result};
use crate::raster::{BitPlane, Raster};
use crate::wsi::{WsiImage, DEFAULT_MPP};

pub const TIFF_TILE: usize = 256;

fn codec(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Codec(format!("{}: {e}", path.display()))
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map_err(|e| Error::io(path, e))
}

/// Read a PNG as RGB in `[0, 1]` (v / 255; 16-bit inputs are reduced to 8 bits).
pub fn read_png(path: &Path) -> Result<Raster> {
    let reader = image::ImageReader::with_format(BufReader::new(open(path)?), image::ImageFormat::Png);
    let img = reader.decode().map_err(|e| codec(path, e))?.to_rgb8();
    Raster::from_u8(img.width() as usize, img.height() as usize, 3, img.as_raw())
}

/// Write a 1- or 3-channel raster as 8-bit PNG.
pub fn write_png(path: &Path, r: &Raster) -> Result<()> {
    let color = match r.channels() {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::Shape(format!("PNG output needs 1 or 3 channels, got {c}"))),
    };
    let bytes = r.to_u8();
    let w = BufWriter::new(create(path)?);
    image::codecs::png::PngEncoder::new(w)
        .write_image(&bytes, r.width() as u32, r.height() as u32, color)
        .map_err(|e| codec(path, e))
}

/// Binary mask as an 8-bit PNG of 0 and 255.
pub fn write_mask_png(path: &Path, mask: &BitPlane) -> Result<()> {
    let data = mask.data().iter().map(|&b| b as f64).collect();
    write_png(path, &Raster::from_vec(mask.width(), mask.height(), 1, data)?)
}

/// Nonzero luminance is set.
pub fn read_mask_png(path: &Path) -> Result<BitPlane> {
    let reader = image::ImageReader::with_format(BufReader::new(open(path)?), image::ImageFormat::Png);
    let img = reader.decode().map_err(|e| codec(path, e))?.to_luma8();
    let w = img.width() as usize;
    Ok(BitPlane::from_fn(w, img.height() as usize, |x, y| img.as_raw()[y * w + x] != 0))
}

fn mpp_from_description(s: &str) -> Option<f64> {
    s.split_whitespace().find_map(|t| t.strip_prefix("mpp=")?.parse().ok())
}

/// Read every page of a TIFF. Pages that form a valid pyramid become its
/// levels; otherwise the pyramid is rebuilt from the first page.
pub fn read_tiff(path: &Path) -> Result<WsiImage> {
    let mut dec = Decoder::new(BufReader::new(open(path)?)).map_err(|e| codec(path, e))?;
    let mpp = dec
        .get_tag_ascii_string(Tag::ImageDescription)
        .ok()
        .and_then(|s| mpp_from_description(&s))
        .unwrap_or(DEFAULT_MPP);
    let mut levels = Vec::new();
    loop {
        let (w, h) = dec.dimensions().map_err(|e| codec(path, e))?;
        let ct = dec.colortype().map_err(|e| codec(path, e))?;
        let data = match dec.read_image().map_err(|e| codec(path, e))? {
            DecodingResult::U8(d) => d,
            _ => return Err(codec(path, "only 8-bit samples are supported")),
        };
        let (w, h) = (w as usize, h as usize);
        let rgb: Vec<u8> = match ct {
            ColorType::RGB(8) => data,
            ColorType::RGBA(8) => data.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            ColorType::Gray(8) => data.iter().flat_map(|&g| [g, g, g]).collect(),
            other => return Err(codec(path, format!("unsupported colour type {other:?}"))),
        };
        levels.push(Raster::from_u8(w, h, 3, &rgb)?);
        if !dec.more_images() {
            break;
        }
        dec.next_image().map_err(|e| codec(path, e))?;
    }
    let pyramid = levels.windows(2).all(|p| p[1].width() * 2 <= p[0].width() + 1 && p[1].height() * 2 <= p[0].height() + 1);
    if pyramid {
        WsiImage::from_levels(levels, mpp)
    } else {
        WsiImage::from_base(levels.swap_remove(0), mpp, TIFF_TILE)
    }
}

/// PNG or TIFF by extension. PNG inputs get a box-filter pyramid.
pub fn read_slide(path: &Path) -> Result<WsiImage> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "png" => WsiImage::from_base(read_png(path)?, DEFAULT_MPP, TIFF_TILE),
        "tif" | "tiff" => read_tiff(path),
        _ => Err(Error::Config(format!("{}: expected .png, .tif or .tiff", path.display()))),
    }
}

const SHORT: u16 = 3;
const LONG: u16 = 4;
const ASCII: u16 = 2;

struct Entry {
    tag: u16,
    kind: u16,
    count: u32,
    /// Inline value or offset.
    value: u32,
}

fn push_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn align(buf: &mut Vec<u8>) {
    if buf.len() % 2 == 1 {
        buf.push(0);
    }
}

/// Encode a pyramid as little-endian tiled TIFF: uncompressed RGB8,
/// 256 px tiles, one page per level, reduced pages marked with
/// NewSubfileType = 1.
pub fn encode_pyramidal_tiff(image: &WsiImage) -> Result<Vec<u8>> {
    let mut buf = b"II*\0".to_vec();
    push_u32(&mut buf, 0);
    let mut next_ptr = 4usize;
    let description = format!("vstain mpp={}\0", image.microns_per_pixel());
    for (k, level) in image.levels().iter().enumerate() {
        let (w, h) = (level.width(), level.height());
        let (tx, ty) = (w.div_ceil(TIFF_TILE), h.div_ceil(TIFF_TILE));
        let bytes = level.to_u8();
        let tile_bytes = TIFF_TILE * TIFF_TILE * 3;
        let mut offsets = Vec::with_capacity(tx * ty);
        for gy in 0..ty {
            for gx in 0..tx {
                offsets.push(buf.len() as u32);
                let mut tile = vec![0u8; tile_bytes];
                for y in 0..TIFF_TILE.min(h - gy * TIFF_TILE) {
                    let sy = gy * TIFF_TILE + y;
                    let x0 = gx * TIFF_TILE;
                    let n = TIFF_TILE.min(w - x0) * 3;
                    let src = (sy * w + x0) * 3;
                    tile[y * TIFF_TILE * 3..y * TIFF_TILE * 3 + n].copy_from_slice(&bytes[src..src + n]);
                }
                buf.extend_from_slice(&tile);
            }
        }
        let array = |buf: &mut Vec<u8>, vals: &[u32]| -> u32 {
            if vals.len() == 1 {
                return vals[0];
            }
            align(buf);
            let at = buf.len() as u32;
            vals.iter().for_each(|&v| push_u32(buf, v));
            at
        };
        let n = offsets.len() as u32;
        let off_at = array(&mut buf, &offsets);
        let counts = vec![tile_bytes as u32; offsets.len()];
        let cnt_at = array(&mut buf, &counts);
        align(&mut buf);
        let bps_at = buf.len() as u32;
        [8u16, 8, 8].iter().for_each(|&v| push_u16(&mut buf, v));
        let desc_at = buf.len() as u32;
        buf.extend_from_slice(description.as_bytes());
        align(&mut buf);

        let entries = [
            Entry { tag: 254, kind: LONG, count: 1, value: u32::from(k > 0) },
            Entry { tag: 256, kind: LONG, count: 1, value: w as u32 },
            Entry { tag: 257, kind: LONG, count: 1, value: h as u32 },
            Entry { tag: 258, kind: SHORT, count: 3, value: bps_at },
            Entry { tag: 259, kind: SHORT, count: 1, value: 1 },
            Entry { tag: 262, kind: SHORT, count: 1, value: 2 },
            Entry { tag: 270, kind: ASCII, count: description.len() as u32, value: desc_at },
            Entry { tag: 277, kind: SHORT, count: 1, value: 3 },
            Entry { tag: 284, kind: SHORT, count: 1, value: 1 },
            Entry { tag: 322, kind: LONG, count: 1, value: TIFF_TILE as u32 },
            Entry { tag: 323, kind: LONG, count: 1, value: TIFF_TILE as u32 },
            Entry { tag: 324, kind: LONG, count: n, value: off_at },
            Entry { tag: 325, kind: LONG, count: n, value: cnt_at },
        ];
        let ifd_at = buf.len() as u32;
        buf[next_ptr..next_ptr + 4].copy_from_slice(&ifd_at.to_le_bytes());
        push_u16(&mut buf, entries.len() as u16);
        for e in &entries {
            push_u16(&mut buf, e.tag);
            push_u16(&mut buf, e.kind);
            push_u32(&mut buf, e.count);
            if e.kind == SHORT && e.count == 1 {
                push_u16(&mut buf, e.value as u16);
                push_u16(&mut buf, 0);
            } else {
                push_u32(&mut buf, e.value);
            }
        }
        next_ptr = buf.len();
        push_u32(&mut buf, 0);
        if buf.len() > u32::MAX as usize {
            return Err(Error::Codec("slide exceeds the 4 GiB classic TIFF limit".into()));
        }
    }
    Ok(buf)
}

pub fn write_pyramidal_tiff(path: &Path, image: &WsiImage) -> Result<()> {
    let bytes = encode_pyramidal_tiff(image)?;
    let mut f = BufWriter::new(create(path)?);
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(open(path)?))?)
}
