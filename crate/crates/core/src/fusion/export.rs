use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use serde::Serialize;

use super::AttentionMap;
use crate::corpus::ImageRecord;
use crate::error::{Error, Result};

/// Low attention is pale yellow, high attention is dark red.
pub fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [(f64, [f64; 3]); 3] = [(0.0, [255.0, 255.0, 204.0]), (0.5, [240.0, 59.0, 32.0]), (1.0, [110.0, 0.0, 0.0])];
    let t = t.clamp(0.0, 1.0);
    let i = if t <= 0.5 { 0 } else { 1 };
    let (t0, c0) = STOPS[i];
    let (t1, c1) = STOPS[i + 1];
    let u = (t - t0) / (t1 - t0);
    [0, 1, 2].map(|k| (c0[k] + u * (c1[k] - c0[k])).round() as u8)
}

/// The image blended with the colormapped attention grid, scaled by its
/// maximum and upsampled with nearest-neighbour cells.
pub fn render_heatmap(image: &ImageRecord, map: &AttentionMap, alpha: f64) -> RgbImage {
    let s = image.size;
    let peak = map.p.iter().cloned().fold(0.0, f64::max);
    let mut out = RgbImage::new(s as u32, s as u32);
    for y in 0..s {
        for x in 0..s {
            let v = map.at(y * map.h / s, x * map.w / s);
            let c = colormap(if peak > 0.0 { v / peak } else { 0.0 });
            let px = [0, 1, 2].map(|k| {
                let base = image.pixels[(y * s + x) * 3 + k] as f64;
                ((1.0 - alpha) * base + alpha * c[k] as f64).round() as u8
            });
            out.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    out
}

#[derive(Serialize)]
struct Sidecar<'a> {
    image_id: &'a str,
    caption_id: &'a str,
    mask_index: usize,
    grid: Vec<Vec<f64>>,
}

/// Writes `<stem>.png` and `<stem>.json`; returns both paths.
pub fn write_attention(dir: &Path, stem: &str, image: &ImageRecord, map: &AttentionMap) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let png = dir.join(format!("{stem}.png"));
    render_heatmap(image, map, 0.6)
        .save_with_format(&png, ImageFormat::Png)
        .map_err(|e| Error::Decode { file: png.clone(), msg: e.to_string() })?;
    let json = dir.join(format!("{stem}.json"));
    let side = Sidecar { image_id: &map.image_id, caption_id: &map.caption_id, mask_index: map.mask_index, grid: map.grid() };
    fs::write(&json, serde_json::to_string_pretty(&side).expect("sidecar serializes")).map_err(|e| Error::io(&json, e))?;
    Ok((png, json))
}
