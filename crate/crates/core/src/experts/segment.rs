//! Color-driven segmentation and tracking used by the oracle experts.

use ndarray::{Array2, ArrayView2, ArrayView3};

use crate::error::{Error, Result};
use crate::synthdata::{ColorName, Shape};
use crate::video::{Mask, MaskVolume, VideoTensor};

/// Maximum RGB distance for a pixel to count as a given color.
pub const COLOR_THRESHOLD: f64 = 0.6;
/// Minimum fill of the bounding box for a component to look like an object.
pub const MIN_COMPACTNESS: f64 = 0.35;
/// Maximum bounding-box elongation for a component to look like an object.
pub const MAX_ELONGATION: f64 = 2.5;
/// Allowed relative area change between tracked frames.
pub const AREA_TOLERANCE: f64 = 0.3;
/// Channel range (max − min) from which a pixel counts as saturated.
pub const SATURATION_THRESHOLD: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub pixels: Vec<(usize, usize)>,
    pub bbox: (usize, usize, usize, usize),
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn compactness(&self) -> f64 {
        let (y0, x0, y1, x1) = self.bbox;
        self.area() as f64 / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64
    }

    pub fn elongation(&self) -> f64 {
        let (y0, x0, y1, x1) = self.bbox;
        let (h, w) = ((y1 - y0 + 1) as f64, (x1 - x0 + 1) as f64);
        h.max(w) / h.min(w)
    }

    pub fn centroid(&self) -> (f64, f64) {
        let n = self.area() as f64;
        let (sy, sx) = self
            .pixels
            .iter()
            .fold((0.0, 0.0), |(a, b), &(y, x)| (a + y as f64, b + x as f64));
        (sy / n, sx / n)
    }

    pub fn mean_color(&self, image: ArrayView3<'_, f64>) -> [f64; 3] {
        let mut sum = [0.0; 3];
        for &(y, x) in &self.pixels {
            for (c, s) in sum.iter_mut().enumerate() {
                *s += image[[c, y, x]];
            }
        }
        sum.map(|s| s / self.area() as f64)
    }

    pub fn to_mask(&self, h: usize, w: usize) -> Mask {
        let mut m = Array2::zeros((h, w));
        for &(y, x) in &self.pixels {
            m[[y, x]] = 1.0;
        }
        m
    }

    fn looks_like_object(&self) -> bool {
        self.area() >= 3 && self.compactness() >= MIN_COMPACTNESS && self.elongation() <= MAX_ELONGATION
    }
}

/// 4-connected components of a boolean image, in raster order of their first pixel.
pub fn connected_components(on: ArrayView2<'_, bool>) -> Vec<Component> {
    let (h, w) = on.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut out = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if !on[[sy, sx]] || seen[[sy, sx]] {
                continue;
            }
            let mut pixels = Vec::new();
            let mut stack = vec![(sy, sx)];
            seen[[sy, sx]] = true;
            let mut bbox = (sy, sx, sy, sx);
            while let Some((y, x)) = stack.pop() {
                pixels.push((y, x));
                bbox = (bbox.0.min(y), bbox.1.min(x), bbox.2.max(y), bbox.3.max(x));
                let neighbours = [
                    (y.wrapping_sub(1), x),
                    (y + 1, x),
                    (y, x.wrapping_sub(1)),
                    (y, x + 1),
                ];
                for (ny, nx) in neighbours {
                    if ny < h && nx < w && on[[ny, nx]] && !seen[[ny, nx]] {
                        seen[[ny, nx]] = true;
                        stack.push((ny, nx));
                    }
                }
            }
            pixels.sort_unstable();
            out.push(Component { pixels, bbox });
        }
    }
    out
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn pixels_near(image: ArrayView3<'_, f64>, color: [f64; 3], threshold: f64) -> Array2<bool> {
    let (_, h, w) = image.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        color_distance([image[[0, y, x]], image[[1, y, x]], image[[2, y, x]]], color) < threshold
    })
}

/// Parses a "<color> <shape>" noun phrase.
pub fn parse_phrase(phrase: &str) -> Result<(ColorName, Shape)> {
    let mut color = None;
    let mut shape = None;
    for word in phrase.split_whitespace().map(str::to_lowercase) {
        if let Ok(c) = word.parse::<ColorName>() {
            color.get_or_insert(c);
        } else if let Ok(s) = word.parse::<Shape>() {
            shape.get_or_insert(s);
        }
    }
    match (color, shape) {
        (Some(c), Some(s)) => Ok((c, s)),
        _ => Err(Error::Expert(format!("cannot parse protagonist phrase {phrase:?}"))),
    }
}

/// A first-frame mask plus whether nothing matched.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub mask: Mask,
    pub empty: bool,
}

/// Picks the object-like component whose mean color is nearest the phrase's color.
pub fn segment_by_phrase(frame: ArrayView3<'_, f64>, phrase: &str) -> Result<Segmentation> {
    let (color, _) = parse_phrase(phrase)?;
    let (_, h, w) = frame.dim();
    let target = color.rgb();
    let on = pixels_near(frame, target, COLOR_THRESHOLD);
    let best = connected_components(on.view())
        .into_iter()
        .filter(Component::looks_like_object)
        .map(|c| (color_distance(c.mean_color(frame), target), c))
        .min_by(|(da, a), (db, b)| da.total_cmp(db).then(b.area().cmp(&a.area())));
    Ok(match best {
        Some((_, c)) => Segmentation {
            mask: c.to_mask(h, w),
            empty: false,
        },
        None => Segmentation {
            mask: Array2::zeros((h, w)),
            empty: true,
        },
    })
}

/// Largest saturated object in an image, for reference pictures without a phrase.
pub fn segment_salient(image: ArrayView3<'_, f64>) -> Segmentation {
    let (_, h, w) = image.dim();
    let on = Array2::from_shape_fn((h, w), |(y, x)| {
        let px = [image[[0, y, x]], image[[1, y, x]], image[[2, y, x]]];
        let hi = px.iter().copied().fold(f64::MIN, f64::max);
        let lo = px.iter().copied().fold(f64::MAX, f64::min);
        hi - lo >= SATURATION_THRESHOLD
    });
    let best = connected_components(on.view())
        .into_iter()
        .filter(Component::looks_like_object)
        .max_by_key(Component::area);
    match best {
        Some(c) => Segmentation {
            mask: c.to_mask(h, w),
            empty: false,
        },
        None => Segmentation {
            mask: Array2::zeros((h, w)),
            empty: true,
        },
    }
}

/// Vocabulary phrase for a masked region: nearest color and a fill-ratio shape guess.
pub fn describe_region(image: ArrayView3<'_, f64>, mask: ArrayView2<'_, f64>) -> Option<String> {
    let on = mask.mapv(|m| m >= 0.5);
    let component = connected_components(on.view()).into_iter().max_by_key(Component::area)?;
    let mean = component.mean_color(image);
    let color = ColorName::ALL
        .iter()
        .copied()
        .min_by(|a, b| color_distance(a.rgb(), mean).total_cmp(&color_distance(b.rgb(), mean)))?;
    let fill = component.compactness();
    let shape = if fill > 0.9 {
        Shape::Square
    } else if fill > 0.65 {
        Shape::Circle
    } else {
        Shape::Triangle
    };
    Some(format!("{color} {shape}"))
}

/// Per-frame masks plus the frames where the track was lost.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub masks: MaskVolume,
    pub lost_frames: Vec<usize>,
}

impl Track {
    pub fn lost(&self) -> bool {
        !self.lost_frames.is_empty()
    }
}

/// Follows the first-frame object by color, area and proximity.
pub fn track_by_color(video: &VideoTensor, first_mask: ArrayView2<'_, f64>) -> Result<Track> {
    let (h, w) = (video.height(), video.width());
    if first_mask.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "first mask {:?} does not match video {h}x{w}",
            first_mask.dim()
        )));
    }
    let on = first_mask.mapv(|m| m >= 0.5);
    let first = connected_components(on.view())
        .into_iter()
        .max_by_key(Component::area)
        .ok_or_else(|| Error::Expert("cannot track an empty first mask".into()))?;
    let frame0 = video.frame(0);
    let color = first.mean_color(frame0);
    let area = first.area() as f64;
    let mut previous = first_mask.to_owned();
    let mut centroid = first.centroid();
    let mut planes = vec![previous.clone()];
    let mut lost_frames = Vec::new();
    for f in 1..video.frames() {
        let frame = video.frame(f);
        let on = pixels_near(frame, color, COLOR_THRESHOLD);
        let best = connected_components(on.view())
            .into_iter()
            .filter(|c| ((c.area() as f64 - area) / area).abs() <= AREA_TOLERANCE)
            .min_by(|a, b| {
                let d = |c: &Component| {
                    let (y, x) = c.centroid();
                    (y - centroid.0).powi(2) + (x - centroid.1).powi(2)
                };
                d(a).total_cmp(&d(b))
            });
        match best {
            Some(c) => {
                centroid = c.centroid();
                previous = c.to_mask(h, w);
            }
            None => lost_frames.push(f),
        }
        planes.push(previous.clone());
    }
    Ok(Track {
        masks: MaskVolume::from_frames(&planes)?,
        lost_frames,
    })
}
