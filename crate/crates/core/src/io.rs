//! PNG-sequence persistence for videos, masks and single images.
//!
//! Layout of a video directory:
//! `meta.json`, `frame_0000.png`, `frame_0001.png`, ... and optionally
//! `mask_0000.png`, ... (protagonist 0) and `mask1_0000.png`, ... (protagonist 1).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::Scene;
use crate::video::{Mask, MaskVolume, VideoTensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VideoMeta {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_frame_rate")]
    pub frame_rate: u32,
    /// Set when some values fell outside [-1, 1] and were clamped on save.
    #[serde(default)]
    pub clamped: bool,
}

fn default_frame_rate() -> u32 {
    VideoTensor::DEFAULT_FRAME_RATE
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame_{index:04}.png"))
}

pub fn mask_path(dir: &Path, protagonist: usize, index: usize) -> PathBuf {
    if protagonist == 0 {
        dir.join(format!("mask_{index:04}.png"))
    } else {
        dir.join(format!("mask{protagonist}_{index:04}.png"))
    }
}

/// Maps [-1, 1] to [0, 255], clamping outside values.
pub fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

pub fn from_u8(p: u8) -> f64 {
    p as f64 / 255.0 * 2.0 - 1.0
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value).map_err(|e| Error::json(path, e))
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Reads an 8-bit PNG and returns (channels, height, width, bytes).
fn read_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let png_err = |e: png::DecodingError| Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Png {
        path: path.to_path_buf(),
        message: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png {
            path: path.to_path_buf(),
            message: "only 8-bit images are supported".into(),
        });
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::Png {
                path: path.to_path_buf(),
                message: format!("unsupported color type {other:?}"),
            })
        }
    };
    buf.truncate(info.buffer_size());
    Ok((channels, info.height as usize, info.width as usize, buf))
}

/// Writes a C × H × W image (C = 1 or 3) as an 8-bit PNG. Returns whether clamping occurred.
pub fn save_image(image: ArrayView3<'_, f64>, path: &Path) -> Result<bool> {
    let (c, h, w) = image.dim();
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::Shape(format!("cannot write {c}-channel image"))),
    };
    let mut clamped = false;
    let mut bytes = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = image[[ch, y, x]];
                clamped |= !(-1.0..=1.0).contains(&v);
                bytes.push(to_u8(v));
            }
        }
    }
    write_png(path, w, h, color, &bytes)?;
    Ok(clamped)
}

/// Loads an 8-bit PNG as a 3 × H × W image in [-1, 1] (alpha dropped, gray replicated).
pub fn load_image(path: &Path) -> Result<Array3<f64>> {
    let (c, h, w, bytes) = read_png(path)?;
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * c;
            for ch in 0..3 {
                let src = if c == 1 { 0 } else { ch };
                out[[ch, y, x]] = from_u8(bytes[base + src]);
            }
        }
    }
    Ok(out)
}

pub fn save_video(video: &VideoTensor, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut clamped = false;
    for f in 0..video.frames() {
        clamped |= save_image(video.frame(f), &frame_path(dir, f))?;
    }
    let [frames, channels, height, width] = video.shape();
    let meta = VideoMeta {
        frames,
        channels,
        height,
        width,
        frame_rate: video.frame_rate(),
        clamped,
    };
    write_json(&dir.join("meta.json"), &meta)
}

pub fn load_video(dir: &Path) -> Result<VideoTensor> {
    let meta_path = dir.join("meta.json");
    if !frame_path(dir, 0).exists() && !meta_path.exists() {
        return Err(Error::NoFrames(dir.to_path_buf()));
    }
    let meta: VideoMeta = read_json(&meta_path)?;
    if meta.frames == 0 {
        return Err(Error::NoFrames(dir.to_path_buf()));
    }
    if frame_path(dir, meta.frames).exists() {
        return Err(Error::Shape(format!(
            "meta.json lists {} frames but more are present in {}",
            meta.frames,
            dir.display()
        )));
    }
    let mut data = Array4::zeros((meta.frames, meta.channels, meta.height, meta.width));
    for f in 0..meta.frames {
        let path = frame_path(dir, f);
        if !path.exists() {
            return Err(Error::MissingFrame {
                dir: dir.to_path_buf(),
                index: f,
            });
        }
        let (c, h, w, bytes) = read_png(&path)?;
        if c != meta.channels || h != meta.height || w != meta.width {
            return Err(Error::Shape(format!(
                "{} is {c}×{h}×{w}, meta.json says {}×{}×{}",
                path.display(),
                meta.channels,
                meta.height,
                meta.width
            )));
        }
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[[f, ch, y, x]] = from_u8(bytes[(y * w + x) * c + ch]);
                }
            }
        }
    }
    Ok(VideoTensor::new(data)?.with_frame_rate(meta.frame_rate))
}

fn mask_to_bytes(mask: ArrayView2<'_, f64>) -> Vec<u8> {
    mask.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn save_mask(mask: ArrayView2<'_, f64>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    write_png(path, w, h, png::ColorType::Grayscale, &mask_to_bytes(mask))
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let (c, h, w, bytes) = read_png(path)?;
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] = bytes[(y * w + x) * c] as f64 / 255.0;
        }
    }
    Ok(out)
}

pub fn save_masks(masks: &[MaskVolume], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (k, m) in masks.iter().enumerate() {
        for f in 0..m.frames() {
            save_mask(m.frame(f), &mask_path(dir, k, f))?;
        }
    }
    Ok(())
}

/// Loads every protagonist mask sequence present for a `frames`-frame video.
pub fn load_masks(dir: &Path, frames: usize) -> Result<Vec<MaskVolume>> {
    let mut out = Vec::new();
    for k in 0.. {
        if !mask_path(dir, k, 0).exists() {
            break;
        }
        let mut planes = Vec::with_capacity(frames);
        for f in 0..frames {
            let path = mask_path(dir, k, f);
            if !path.exists() {
                return Err(Error::MissingFrame {
                    dir: dir.to_path_buf(),
                    index: f,
                });
            }
            planes.push(load_mask(&path)?);
        }
        out.push(MaskVolume::from_frames(&planes)?);
    }
    Ok(out)
}

/// Writes frames, masks and `scene.json` for a generated scene.
pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    save_video(&scene.video, dir)?;
    save_masks(&scene.masks, dir)?;
    write_json(&dir.join("scene.json"), &scene.descriptor)
}

/// Writes a `step,loss` CSV with 1-based step numbers.
pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{},{l}\n", i + 1));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads the losses back from a CSV written by [`write_loss_csv`].
pub fn read_loss_csv(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("step,loss") {
        return Err(Error::Invalid(format!("{}: missing step,loss header", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let (step, loss) = line
                .split_once(',')
                .ok_or_else(|| Error::Invalid(format!("{}: malformed row {}", path.display(), i + 2)))?;
            if step.parse::<usize>().ok() != Some(i + 1) {
                return Err(Error::Invalid(format!("{}: step {step} out of order", path.display())));
            }
            loss.parse::<f64>()
                .map_err(|e| Error::Invalid(format!("{}: row {}: {e}", path.display(), i + 2)))
        })
        .collect()
}

/// Quantizes a video exactly as a save/load round trip would.
pub fn quantize(video: &VideoTensor) -> VideoTensor {
    video.map(|v| from_u8(to_u8(v)))
}
