//! DPR1 rasters: magic `DPR1`, little-endian `u32` width, height and channel
//! count, one tag byte, then row-major `f32` values with channels interleaved.
//! A sample file is the rgb, depth, normal, matte and mask rasters in order.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use super::render::{DenseSample, Provenance};
use crate::error::{Error, Result};

pub const RASTER_MAGIC: &[u8; 4] = b"DPR1";
const HEADER_LEN: usize = 17;
/// Set on the tag byte of rasters that carry pseudo labels.
const PSEUDO_BIT: u8 = 0x80;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RasterTag {
    Rgb = 1,
    Depth = 2,
    Normal = 3,
    Matte = 4,
    Mask = 5,
}

impl RasterTag {
    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => Self::Rgb,
            2 => Self::Depth,
            3 => Self::Normal,
            4 => Self::Matte,
            5 => Self::Mask,
            _ => return None,
        })
    }

    pub fn channels(self) -> usize {
        match self {
            Self::Rgb | Self::Normal => 3,
            Self::Depth | Self::Matte | Self::Mask => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub tag: RasterTag,
    pub pseudo: bool,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn channels(&self) -> usize {
        self.tag.channels()
    }
}

pub fn write_raster(out: &mut Vec<u8>, r: &Raster) -> Result<()> {
    let want = r.width * r.height * r.channels();
    if r.data.len() != want {
        return Err(Error::Shape(format!(
            "{:?} raster has {} values, expected {want}",
            r.tag,
            r.data.len()
        )));
    }
    let dims = [r.width, r.height, r.channels()].map(|v| {
        u32::try_from(v).map_err(|_| Error::Shape(format!("raster dimension {v} exceeds u32")))
    });
    out.extend_from_slice(RASTER_MAGIC);
    for d in dims {
        out.extend_from_slice(&d?.to_le_bytes());
    }
    out.push(r.tag as u8 | if r.pseudo { PSEUDO_BIT } else { 0 });
    out.reserve(4 * r.data.len());
    for v in &r.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Parse one raster starting at `*pos`, advancing it past the raster.
pub fn read_raster(bytes: &[u8], pos: &mut usize) -> Result<Raster> {
    let start = *pos;
    let at = |off: usize| (start + off) as u64;
    let header = bytes
        .get(start..start + HEADER_LEN)
        .ok_or_else(|| Error::format(at(0), format!("truncated raster header, need {HEADER_LEN} bytes")))?;
    if &header[..4] != RASTER_MAGIC {
        let message = if &header[..3] == b"DPR" {
            format!("unsupported raster version {:?}, expected magic \"DPR1\"", header[3] as char)
        } else {
            format!("bad magic {:?}, expected \"DPR1\"", String::from_utf8_lossy(&header[..4]))
        };
        return Err(Error::format(at(0), message));
    }
    let word = |k: usize| u32::from_le_bytes(header[4 + 4 * k..8 + 4 * k].try_into().expect("4 bytes")) as usize;
    let (width, height, channels) = (word(0), word(1), word(2));
    let code = header[16];
    let tag = RasterTag::from_code(code & !PSEUDO_BIT)
        .ok_or_else(|| Error::format(at(16), format!("unknown raster tag {code:#04x}")))?;
    if width == 0 || height == 0 {
        return Err(Error::format(at(4), format!("empty raster {width}x{height}")));
    }
    if channels != tag.channels() {
        return Err(Error::format(
            at(12),
            format!("{tag:?} raster needs {} channels, header says {channels}", tag.channels()),
        ));
    }
    let count = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::format(at(4), "raster dimensions overflow"))?;
    let body_start = start + HEADER_LEN;
    let body = count
        .checked_mul(4)
        .and_then(|len| bytes.get(body_start..body_start.checked_add(len)?))
        .ok_or_else(|| {
            Error::format(
                body_start as u64,
                format!("truncated raster body: need {count} floats, {} bytes remain", bytes.len() - body_start),
            )
        })?;
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    *pos = body_start + body.len();
    Ok(Raster {
        width,
        height,
        tag,
        pseudo: code & PSEUDO_BIT != 0,
        data,
    })
}

fn sample_rasters(s: &DenseSample) -> [Raster; 5] {
    let pseudo = s.provenance == Provenance::Pseudo;
    let make = |tag, pseudo, data: Vec<f32>| Raster {
        width: s.width,
        height: s.height,
        tag,
        pseudo,
        data,
    };
    [
        make(RasterTag::Rgb, false, s.rgb.clone()),
        make(RasterTag::Depth, pseudo, s.depth.clone()),
        make(RasterTag::Normal, pseudo, s.normal.clone()),
        make(RasterTag::Matte, false, s.matte.clone()),
        make(
            RasterTag::Mask,
            false,
            s.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        ),
    ]
}

pub fn encode_sample(s: &DenseSample) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in sample_rasters(s) {
        write_raster(&mut out, &r)?;
    }
    Ok(out)
}

pub fn decode_sample(bytes: &[u8]) -> Result<DenseSample> {
    const ORDER: [RasterTag; 5] = [
        RasterTag::Rgb,
        RasterTag::Depth,
        RasterTag::Normal,
        RasterTag::Matte,
        RasterTag::Mask,
    ];
    let mut pos = 0;
    let mut rasters = Vec::with_capacity(ORDER.len());
    for want in ORDER {
        let start = pos as u64;
        let r = read_raster(bytes, &mut pos)?;
        if r.tag != want {
            return Err(Error::format(start + 16, format!("expected {want:?} raster, found {:?}", r.tag)));
        }
        if let Some(first) = rasters.first() {
            let first: &Raster = first;
            if (r.width, r.height) != (first.width, first.height) {
                return Err(Error::format(
                    start + 4,
                    format!(
                        "{want:?} raster is {}x{}, rgb is {}x{}",
                        r.width, r.height, first.width, first.height
                    ),
                ));
            }
        }
        rasters.push(r);
    }
    if pos != bytes.len() {
        return Err(Error::format(pos as u64, format!("{} trailing bytes", bytes.len() - pos)));
    }
    let [rgb, depth, normal, matte, mask]: [Raster; 5] = rasters.try_into().expect("five rasters");
    let mut bits = Vec::with_capacity(mask.data.len());
    let mask_body = mask_offset(bytes.len(), mask.data.len());
    for (i, &v) in mask.data.iter().enumerate() {
        match v {
            0.0 => bits.push(false),
            1.0 => bits.push(true),
            _ => {
                return Err(Error::format(
                    (mask_body + 4 * i) as u64,
                    format!("mask value {v} is neither 0 nor 1"),
                ))
            }
        }
    }
    Ok(DenseSample {
        width: rgb.width,
        height: rgb.height,
        rgb: rgb.data,
        provenance: if depth.pseudo {
            Provenance::Pseudo
        } else {
            Provenance::Synthetic
        },
        depth: depth.data,
        normal: normal.data,
        matte: matte.data,
        mask: bits,
    })
}

/// The mask raster is last, so its body ends at the end of the file.
fn mask_offset(file_len: usize, values: usize) -> usize {
    file_len - 4 * values
}

pub fn write_sample(sample: &DenseSample, path: &Path) -> Result<()> {
    let bytes = encode_sample(sample)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_sample(path: &Path) -> Result<DenseSample> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sample(&bytes)
}

/// Save the RGB raster as an 8-bit PNG for inspection.
pub fn write_png_rgb(sample: &DenseSample, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut enc = png::Encoder::new(BufWriter::new(file), sample.width as u32, sample.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let pixels: Vec<u8> = sample
        .rgb
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    enc.write_header()
        .and_then(|mut w| w.write_image_data(&pixels))
        .map_err(to_io)
}
