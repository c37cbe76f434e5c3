//! PNG helpers shared by the raw-frame, rendering and analysis writers.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::plane::Plane;

/// Grayscale PNG as 16-bit values; 8-bit files are widened without scaling.
pub fn read_gray16(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u16>)> {
    let path = path.as_ref();
    let img = image::open(path)?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let data = match img {
        image::DynamicImage::ImageLuma16(buf) => buf.into_raw(),
        image::DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(u16::from).collect(),
        other => {
            return Err(Error::format(
                path.display().to_string(),
                format!("expected a grayscale PNG, found {:?}", other.color()),
            ))
        }
    };
    Ok((height, width, data))
}

pub fn write_gray16(path: impl AsRef<Path>, height: usize, width: usize, data: &[u16]) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, data.to_vec())
            .ok_or_else(|| Error::contract("pixel count differs from the frame size"))?;
    buf.save(path.as_ref())?;
    Ok(())
}

/// 8-bit RGB PNG from pixel-interleaved bytes.
pub fn write_rgb8(path: impl AsRef<Path>, height: usize, width: usize, data: &[u8]) -> Result<()> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(width as u32, height as u32, data.to_vec())
        .ok_or_else(|| Error::contract("byte count differs from the image size"))?;
    buf.save(path.as_ref())?;
    Ok(())
}

pub fn read_rgb8(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path.as_ref())?.into_rgb8();
    Ok((img.height() as usize, img.width() as usize, img.into_raw()))
}

/// Label map as an 8-bit grayscale PNG; `None` entries become 255.
pub fn write_labels(path: impl AsRef<Path>, labels: &Plane<Option<usize>>) -> Result<()> {
    if labels.as_slice().iter().flatten().any(|l| *l >= 255) {
        return Err(Error::contract("label PNG holds at most 255 classes"));
    }
    let bytes: Vec<u8> = labels.as_slice().iter().map(|l| l.map_or(255, |v| v as u8)).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(labels.width() as u32, labels.height() as u32, bytes)
            .expect("plane length matches its shape");
    buf.save(path.as_ref())?;
    Ok(())
}
