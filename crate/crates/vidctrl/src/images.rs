//! 8-bit PNG frames and condition maps.

use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use vidctrl_core::dataset::Modality;
use vidctrl_core::Tensor;

use crate::error::{Error, Result};

fn to_u8(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save(path: &Path, img: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

/// `[3, H, W]` in `[-1, 1]` as an RGB image.
pub fn rgb_frame_image(frame: &[f32], h: usize, w: usize) -> RgbImage {
    let plane = h * w;
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([0, 1, 2].map(|c| to_u8((frame[c * plane + i] + 1.0) / 2.0)))
    })
}

/// Writes `frame_000.png`, `frame_001.png`, ... for an `[N, 3, H, W]` video in `[-1, 1]`.
pub fn save_video_frames(dir: &Path, video: &Tensor<f32>) -> Result<Vec<PathBuf>> {
    let (n, c, h, w) = video.dims4();
    if c != 3 {
        return Err(Error::Usage(format!("expected an RGB video, got {c} channels")));
    }
    (0..n)
        .map(|i| {
            let path = dir.join(format!("frame_{i:03}.png"));
            let img = rgb_frame_image(video.slab(i), h, w);
            save(&path, |p| img.save(p))?;
            Ok(path)
        })
        .collect()
}

/// Writes one `[C, H, W]` condition map in its modality's pixel convention.
pub fn save_condition(path: &Path, map: &Tensor<f32>, modality: Modality) -> Result<()> {
    let (h, w) = (map.shape()[1], map.shape()[2]);
    match modality {
        Modality::Rgb => {
            let img = rgb_frame_image(map.data(), h, w);
            save(path, |p| img.save(p))
        }
        Modality::Depth | Modality::Sketch => {
            let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(map.data()[y as usize * w + x as usize])]));
            save(path, |p| img.save(p))
        }
    }
}

/// Reads a condition map `[C, H, W]`: RGB maps to `[-1, 1]`, depth to `[0, 1]`,
/// sketch to `{0, 1}` (threshold at half intensity).
pub fn load_condition(path: &Path, modality: Modality, height: usize, width: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Usage(format!("{}: {other}", path.display())),
    })?;
    if (img.width() as usize, img.height() as usize) != (width, height) {
        return Err(Error::Usage(format!(
            "{} is {}x{}, the model expects {width}x{height}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    let plane = height * width;
    Ok(match modality {
        Modality::Rgb => {
            let rgb = img.to_rgb8();
            let mut out = vec![0.0f32; 3 * plane];
            for (i, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    out[c * plane + i] = px[c] as f32 / 255.0 * 2.0 - 1.0;
                }
            }
            Tensor::from_vec(&[3, height, width], out)?
        }
        Modality::Depth => {
            let g = img.to_luma8();
            Tensor::from_vec(&[1, height, width], g.pixels().map(|p| p[0] as f32 / 255.0).collect())?
        }
        Modality::Sketch => {
            let g = img.to_luma8();
            Tensor::from_vec(&[1, height, width], g.pixels().map(|p| if p[0] >= 128 { 1.0 } else { 0.0 }).collect())?
        }
    })
}
