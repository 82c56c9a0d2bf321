use std::io::Cursor;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::{DynamicImage, ImageFormat, ImageReader};

use crate::error::{Error, Result};

/// Largest accepted source image side, in pixels.
pub const MAX_SIDE: u32 = 8192;

/// Decodes an encoded raster (PNG or any format the decoder recognizes)
/// and returns a `[channels, size, size]` tensor scaled to `[-1, 1]`.
pub fn decode_image(bytes: &[u8], channels: usize, size: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut reader = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::Data(format!("image: {e}")))?;
    let mut limits = image::Limits::default();
    limits.max_image_width = Some(MAX_SIDE);
    limits.max_image_height = Some(MAX_SIDE);
    reader.limits(limits);
    let img = reader.decode().map_err(|e| Error::Data(format!("image: {e}")))?;
    preprocess(&img, channels, size, dtype, device)
}

pub fn load_image(path: &Path, channels: usize, size: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, channels, size, dtype, device).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn preprocess(img: &DynamicImage, channels: usize, size: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let side = u32::try_from(size).map_err(|_| Error::Config(format!("image size {size} too large")))?;
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Data("image has zero area".into()));
    }
    let resized = if (img.width(), img.height()) == (side, side) {
        img.clone()
    } else {
        img.resize_exact(side, side, FilterType::Triangle)
    };
    let values: Vec<f32> = match channels {
        1 => resized.to_luma8().into_raw().into_iter().map(scale).collect(),
        3 => {
            let rgb = resized.to_rgb8();
            let mut planar = vec![0.0; 3 * size * size];
            for (i, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    planar[c * size * size + i] = scale(px[c]);
                }
            }
            planar
        }
        other => return Err(Error::Config(format!("unsupported channel count {other}"))),
    };
    Ok(Tensor::from_vec(values, (channels, size, size), device)?.to_dtype(dtype)?)
}

fn scale(v: u8) -> f32 {
    f32::from(v) / 127.5 - 1.0
}

pub fn encode_png(img: &image::GrayImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .map_err(|e| Error::Data(format!("png encode: {e}")))?;
    Ok(out)
}
