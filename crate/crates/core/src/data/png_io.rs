use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// `[3, H, W]` in [-1, 1] to interleaved 8-bit RGB.
pub fn to_rgb8(image: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (image.dim(1), image.dim(2));
    let d = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            let v = ((d[c * h * w + p] + 1.0) * 127.5).round().clamp(0.0, 255.0);
            out.push(v as u8);
        }
    }
    out
}

pub fn from_rgb8(h: usize, w: usize, rgb: &[u8]) -> Tensor<f32> {
    let mut data = vec![0.0f32; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            data[c * h * w + p] = rgb[p * 3 + c] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("sized above")
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn write_rgb(path: &Path, image: &Tensor<f32>) -> Result<()> {
    write_png(path, image.dim(2), image.dim(1), png::ColorType::Rgb, &to_rgb8(image))
}

pub fn write_rgb8(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    write_png(path, w, h, png::ColorType::Rgb, rgb)
}

pub fn write_gray(path: &Path, w: usize, h: usize, values: &[u8]) -> Result<()> {
    write_png(path, w, h, png::ColorType::Grayscale, values)
}

/// Decoded 8-bit image: `(width, height, channels, bytes)`.
pub fn read_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Ingestion(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    Ok((info.width as usize, info.height as usize, channels, buf))
}

/// Read an RGB (or RGBA / gray) PNG as `[3, H, W]` in [-1, 1].
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let (w, h, ch, bytes) = read_png(path)?;
    let rgb: Vec<u8> = match ch {
        3 => bytes,
        4 => bytes.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        1 => bytes.iter().flat_map(|&g| [g, g, g]).collect(),
        2 => bytes.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        _ => return Err(Error::Ingestion(format!("{}: unsupported channel count {ch}", path.display()))),
    };
    Ok(from_rgb8(h, w, &rgb))
}

/// Read a single-channel label PNG.
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, ch, bytes) = read_png(path)?;
    if ch != 1 {
        return Err(Error::Ingestion(format!(
            "{}: mask must be single-channel, found {ch} channels",
            path.display()
        )));
    }
    Ok((w, h, bytes))
}
