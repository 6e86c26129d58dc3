//! Image inputs and visualisation outputs.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use d3_core::scenegen::{decode_sample, read_raster, Raster, RasterTag, RASTER_MAGIC};
use d3_core::{Error, Result, Tensor};

fn io_err(path: &Path, e: impl std::error::Error + Send + Sync + 'static) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// Read an RGB image in [0, 1] as `(height, width, HWC data)`.
///
/// PNG files may be gray, RGB or RGBA; DPR1 files may hold a full sample or
/// a lone RGB raster.
pub fn read_rgb(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    if bytes.starts_with(RASTER_MAGIC) {
        if let Ok(sample) = decode_sample(&bytes) {
            return Ok((sample.height, sample.width, sample.rgb));
        }
        let mut pos = 0;
        let r = read_raster(&bytes, &mut pos)?;
        if r.tag != RasterTag::Rgb {
            return Err(Error::Input(format!(
                "{} holds a {:?} raster, not an RGB image",
                path.display(),
                r.tag
            )));
        }
        return Ok((r.height, r.width, r.data));
    }
    let mut dec = png::Decoder::new(&bytes[..]);
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info().map_err(|e| io_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| io_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::Input(format!("{}: unsupported PNG colour type {other:?}", path.display())));
        }
    };
    let mut rgb = Vec::with_capacity(h * w * 3);
    for px in buf[..info.buffer_size()].chunks_exact(stride) {
        let c = |i: usize| f32::from(px[i]) / 255.0;
        if stride < 3 {
            rgb.extend([c(0); 3]);
        } else {
            rgb.extend([c(0), c(1), c(2)]);
        }
    }
    Ok((h, w, rgb))
}

/// HWC RGB in [0, 1] to a `[1, 3, h, w]` network input in [-1, 1].
pub fn rgb_tensor(h: usize, w: usize, rgb: &[f32]) -> Result<Tensor> {
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for i in 0..hw {
        for c in 0..3 {
            data[c * hw + i] = 2.0 * rgb[3 * i + c] - 1.0;
        }
    }
    Tensor::from_vec([1, 3, h, w], data)
}

/// 8-bit visualisation: depth as inverse-depth grey, normals mapped from
/// [-1, 1] to colour, mattes as grey.
pub fn write_png_map(r: &Raster, path: &Path) -> Result<()> {
    let (color, pixels): (png::ColorType, Vec<u8>) = match r.tag {
        RasterTag::Depth => {
            let inv: Vec<f32> = r.data.iter().map(|&d| 1.0 / d.max(1e-3)).collect();
            let lo = inv.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = inv.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let span = (hi - lo).max(1e-12);
            (png::ColorType::Grayscale, inv.iter().map(|v| to_u8((v - lo) / span)).collect())
        }
        RasterTag::Normal | RasterTag::Rgb => {
            let map = if r.tag == RasterTag::Normal { |v: f32| 0.5 * (v + 1.0) } else { |v: f32| v };
            (png::ColorType::Rgb, r.data.iter().map(|&v| to_u8(map(v))).collect())
        }
        RasterTag::Matte | RasterTag::Mask => (png::ColorType::Grayscale, r.data.iter().map(|&v| to_u8(v)).collect()),
    };
    let file = fs::File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut enc = png::Encoder::new(BufWriter::new(file), r.width as u32, r.height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()
        .and_then(|mut w| w.write_image_data(&pixels))
        .map_err(|e| io_err(path, e))
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
