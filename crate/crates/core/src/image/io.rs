use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use super::Image;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const QPT_MAGIC: &[u8; 4] = b"QPT1";

/// Reads an 8-bit gray/RGB(A) PNG into `[0, 1]`.
pub fn load_png<T: Scalar>(path: impl AsRef<Path>) -> Result<Image<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(
            path,
            format!("unsupported bit depth {:?}; only 8-bit is accepted", info.bit_depth),
        ));
    }
    let channels = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * channels);
    for row in buf.chunks(info.line_size).take(h) {
        data.extend(row[..w * channels].iter().map(|&b| T::of(b as f64 / 255.0)));
    }
    Image::new(w, h, channels, data).map_err(|e| Error::format(path, e.to_string()))
}

/// Quantizes a sample in `[0, 1]` to a byte, rounding half away from zero.
#[inline]
pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- to 4-channel image as an 8-bit PNG.
pub fn save_png<T: Scalar>(img: &Image<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        2 => png::ColorType::GrayscaleAlpha,
        3 => png::ColorType::Rgb,
        4 => png::ColorType::Rgba,
        n => return Err(Error::invalid(format!("cannot write {n}-channel image as PNG"))),
    };
    let bytes: Vec<u8> = img.data().iter().map(|v| quantize(v.f64())).collect();
    let mut encoded = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut encoded, img.width() as u32, img.height() as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
        writer
            .write_image_data(&bytes)
            .map_err(|e| Error::format(path, e.to_string()))?;
        writer.finish().map_err(|e| Error::format(path, e.to_string()))?;
    }
    write_atomic(path, &encoded)
}

/// Serializes to the QPT1 raw tensor layout.
pub fn encode_qpt<T: Scalar>(img: &Image<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + img.data().len() * 4);
    out.extend_from_slice(QPT_MAGIC);
    for v in [img.width(), img.height(), img.channels(), 0] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode_qpt<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Image<T>> {
    if bytes.len() < 20 || &bytes[..4] != QPT_MAGIC {
        return Err(Error::format(path, "missing QPT1 header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (w, h, c) = (word(0), word(1), word(2));
    let n = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::format(path, "QPT1 dimensions overflow"))?;
    if bytes.len() != 20 + 4 * n {
        return Err(Error::format(
            path,
            format!(
                "QPT1 payload holds {} bytes, header implies {}",
                bytes.len() - 20,
                4 * n
            ),
        ));
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|b| T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
        .collect();
    Image::new(w, h, c, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_qpt<T: Scalar>(img: &Image<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_qpt(img))
}

pub fn read_qpt<T: Scalar>(path: impl AsRef<Path>) -> Result<Image<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_qpt(&bytes, path)
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let mut f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
