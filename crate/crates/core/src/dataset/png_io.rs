use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ImageEncoder, RgbImage};

use crate::error::{Error, Result};
use crate::raster::LabelMap;

fn codec_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Codec {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Loads any supported image and converts it to RGB8.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| codec_err(path, e))?;
    Ok(img.to_rgb8())
}

pub fn encode_rgb_png(img: &RgbImage) -> Vec<u8> {
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .expect("in-memory png encoding");
    buf
}

pub fn write_rgb_png(img: &RgbImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_rgb_png(img)).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit (or lower) indexed or grayscale PNG as raw label indices.
/// Palette entries are ignored; only the indices matter.
pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| codec_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| codec_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| codec_err(path, e))?;
    let (w, h) = (info.width, info.height);
    match info.color_type {
        png::ColorType::Indexed | png::ColorType::Grayscale => {}
        other => {
            return Err(codec_err(
                path,
                format!("label maps must be indexed or grayscale, got {other:?}"),
            ))
        }
    }
    let bits = info.bit_depth as u32;
    let mut data = Vec::with_capacity(w as usize * h as usize);
    for y in 0..h as usize {
        let line = &buf[y * info.line_size..(y + 1) * info.line_size];
        match bits {
            8 => data.extend_from_slice(&line[..w as usize]),
            16 => {
                for x in 0..w as usize {
                    let v = u16::from_be_bytes([line[2 * x], line[2 * x + 1]]);
                    let v = u8::try_from(v)
                        .map_err(|_| codec_err(path, format!("label {v} exceeds 255")))?;
                    data.push(v);
                }
            }
            1 | 2 | 4 => {
                let per_byte = 8 / bits;
                let mask = (1u8 << bits) - 1;
                for x in 0..w {
                    let byte = line[(x / per_byte) as usize];
                    let shift = 8 - bits * (x % per_byte + 1);
                    data.push((byte >> shift) & mask);
                }
            }
            _ => return Err(codec_err(path, format!("unsupported bit depth {bits}"))),
        }
    }
    Ok(LabelMap::from_vec(w, h, data).expect("row loop fills w*h"))
}

/// Standard VOC color map: bit-interleaved RGB for each index.
pub fn voc_palette() -> Vec<u8> {
    let mut pal = Vec::with_capacity(256 * 3);
    for i in 0..256u32 {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = i;
        for j in 0..8 {
            r |= ((c & 1) as u8) << (7 - j);
            g |= (((c >> 1) & 1) as u8) << (7 - j);
            b |= (((c >> 2) & 1) as u8) << (7 - j);
            c >>= 3;
        }
        pal.extend_from_slice(&[r, g, b]);
    }
    pal
}

/// Writes a label map as an 8-bit paletted PNG with the VOC color map.
pub fn write_label_png(map: &LabelMap, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, map.width(), map.height());
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(voc_palette());
        let mut writer = enc.write_header().map_err(|e| codec_err(path, e))?;
        writer
            .write_image_data(map.as_slice())
            .map_err(|e| codec_err(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
