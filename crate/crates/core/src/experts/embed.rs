//! Deterministic toy embedders sharing one 32-dim space.
//!
//! Visual embedding: a 27-bin soft RGB histogram of the (masked) pixels,
//! unit-normalized, followed by five weighted shape moments of the mask.
//! Textual embedding: a bag of vocabulary attributes.

use ndarray::{Array1, Array2, ArrayView2, ArrayView3};

use crate::error::{Error, Result};
use crate::synthdata::{canonical_render, render_background, BackgroundSpec, BackgroundStyle, ColorName, Direction, Shape};
use crate::video::{Embedding, EmbeddingSpace, EMBED_DIM};

pub const HISTOGRAM_BINS: usize = 27;
/// Weight of the shape moments relative to the unit-norm histogram.
pub const MOMENT_WEIGHT: f64 = 0.15;
/// Hue used by the prior when a prompt names no color.
pub const DEFAULT_PRIOR_COLOR: ColorName = ColorName::Yellow;
pub const DEFAULT_PRIOR_SHAPE: Shape = Shape::Square;

const BIN_CENTERS: [f64; 3] = [-2.0 / 3.0, 0.0, 2.0 / 3.0];

/// Triangular membership of `v` in the three per-channel bins.
fn soft_bins(v: f64) -> [f64; 3] {
    let step = BIN_CENTERS[1] - BIN_CENTERS[0];
    let v = v.clamp(BIN_CENTERS[0], BIN_CENTERS[2]);
    let mut w = [0.0; 3];
    if v <= BIN_CENTERS[1] {
        let t = (v - BIN_CENTERS[0]) / step;
        w[0] = 1.0 - t;
        w[1] = t;
    } else {
        let t = (v - BIN_CENTERS[1]) / step;
        w[1] = 1.0 - t;
        w[2] = t;
    }
    w
}

/// Histogram bin index of per-channel bins `(r, g, b)`.
pub fn bin_index(r: usize, g: usize, b: usize) -> usize {
    (r * 3 + g) * 3 + b
}

/// Unnormalized, mask-weighted soft histogram of a `[3, H, W]` image.
pub fn soft_histogram(image: ArrayView3<'_, f64>, mask: ArrayView2<'_, f64>) -> [f64; HISTOGRAM_BINS] {
    let mut hist = [0.0; HISTOGRAM_BINS];
    let (h, w) = mask.dim();
    for y in 0..h {
        for x in 0..w {
            let m = mask[[y, x]];
            if m <= 0.0 {
                continue;
            }
            let (r, g, b) = (soft_bins(image[[0, y, x]]), soft_bins(image[[1, y, x]]), soft_bins(image[[2, y, x]]));
            for (i, &wr) in r.iter().enumerate() {
                if wr == 0.0 {
                    continue;
                }
                for (j, &wg) in g.iter().enumerate() {
                    if wg == 0.0 {
                        continue;
                    }
                    for (k, &wb) in b.iter().enumerate() {
                        hist[bin_index(i, j, k)] += m * wr * wg * wb;
                    }
                }
            }
        }
    }
    hist
}

/// Area fraction, centered centroid and spread of a mask, all in frame units.
pub fn shape_moments(mask: ArrayView2<'_, f64>) -> Result<[f64; 5]> {
    let (h, w) = mask.dim();
    let total: f64 = mask.sum();
    if total <= 0.0 {
        return Err(Error::Invalid("cannot embed a zero-area mask".into()));
    }
    let (mut cx, mut cy) = (0.0, 0.0);
    for ((y, x), &m) in mask.indexed_iter() {
        cx += m * (x as f64 + 0.5) / w as f64;
        cy += m * (y as f64 + 0.5) / h as f64;
    }
    cx /= total;
    cy /= total;
    let (mut vx, mut vy) = (0.0, 0.0);
    for ((y, x), &m) in mask.indexed_iter() {
        vx += m * ((x as f64 + 0.5) / w as f64 - cx).powi(2);
        vy += m * ((y as f64 + 0.5) / h as f64 - cy).powi(2);
    }
    Ok([
        total / (h * w) as f64,
        cx - 0.5,
        cy - 0.5,
        (vx / total).sqrt(),
        (vy / total).sqrt(),
    ])
}

/// Visual embedding of a `[3, H, W]` image, optionally restricted to a mask.
pub fn embed_image(image: ArrayView3<'_, f64>, mask: Option<ArrayView2<'_, f64>>) -> Result<Embedding> {
    let (c, h, w) = image.dim();
    if c != 3 {
        return Err(Error::Shape(format!("expected a 3-channel image, got {c}")));
    }
    let full;
    let mask = match mask {
        Some(m) => {
            if m.dim() != (h, w) {
                return Err(Error::Shape(format!("mask {:?} does not match image {h}x{w}", m.dim())));
            }
            m
        }
        None => {
            full = Array2::ones((h, w));
            full.view()
        }
    };
    let moments = shape_moments(mask)?;
    let hist = soft_histogram(image, mask);
    let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 0.0 || !norm.is_finite() {
        return Err(Error::Numerical("image histogram is empty".into()));
    }
    let mut data = Array1::zeros(EMBED_DIM);
    for (i, v) in hist.iter().enumerate() {
        data[i] = v / norm;
    }
    for (i, m) in moments.iter().enumerate() {
        data[HISTOGRAM_BINS + i] = MOMENT_WEIGHT * m;
    }
    Embedding::new(data, EmbeddingSpace::Visual)
}

/// Dimension layout of the textual bag-of-attributes embedding.
const TEXT_COLORS: usize = 0;
const TEXT_SHAPES: usize = TEXT_COLORS + 6;
const TEXT_STYLES: usize = TEXT_SHAPES + 3;
const TEXT_DIRECTIONS: usize = TEXT_STYLES + 3;

/// Lowercased alphanumeric words of a prompt.
pub fn tokens(prompt: &str) -> Vec<String> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn style_word(token: &str) -> Option<BackgroundStyle> {
    match token {
        "solid" | "plain" => Some(BackgroundStyle::Solid),
        "gradient" => Some(BackgroundStyle::Gradient),
        "striped" | "stripes" | "stripe" => Some(BackgroundStyle::Stripes),
        _ => None,
    }
}

fn text_dim(token: &str) -> Option<usize> {
    if let Ok(c) = token.parse::<ColorName>() {
        return ColorName::ALL.iter().position(|&x| x == c).map(|i| TEXT_COLORS + i);
    }
    let singular = token.strip_suffix('s').unwrap_or(token);
    if let Some(i) = Shape::ALL.iter().position(|s| s.word() == token || s.word() == singular) {
        return Some(TEXT_SHAPES + i);
    }
    if let Some(style) = style_word(token) {
        return BackgroundStyle::ALL.iter().position(|&s| s == style).map(|i| TEXT_STYLES + i);
    }
    Direction::ALL
        .iter()
        .position(|d| d.word() == token)
        .map(|i| TEXT_DIRECTIONS + i)
}

/// A textual embedding plus whether the prompt contained no vocabulary at all.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub embedding: Embedding,
    pub neutral: bool,
}

/// Bag-of-attributes embedding; word order and unknown words are ignored.
pub fn embed_text(prompt: &str) -> TextEmbedding {
    let mut data = Array1::zeros(EMBED_DIM);
    for t in tokens(prompt) {
        if let Some(d) = text_dim(&t) {
            data[d] = 1.0;
        }
    }
    let neutral = data.iter().all(|&v| v == 0.0);
    if neutral {
        data.fill(1.0);
    }
    TextEmbedding {
        embedding: Embedding::new(data, EmbeddingSpace::Textual).expect("nonzero by construction"),
        neutral,
    }
}

/// Vocabulary read out of a prompt, split into protagonist and background parts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptAttributes {
    pub protagonist_color: Option<ColorName>,
    pub shape: Option<Shape>,
    pub background_color: Option<ColorName>,
    pub style: Option<BackgroundStyle>,
}

impl PromptAttributes {
    pub fn has_protagonist(&self) -> bool {
        self.shape.is_some() || self.protagonist_color.is_some()
    }

    pub fn has_background(&self) -> bool {
        self.style.is_some() || self.background_color.is_some()
    }
}

/// Splits at "on": words before describe the protagonist, words after the
/// background. Without "on", a prompt mentioning a style or the word
/// "background" is all background.
pub fn parse_prompt(prompt: &str) -> PromptAttributes {
    let toks = tokens(prompt);
    let split = toks.iter().position(|t| t == "on");
    let backgroundish = toks.iter().any(|t| t == "background" || style_word(t).is_some());
    let (front, back): (&[String], &[String]) = match split {
        Some(i) => (&toks[..i], &toks[i + 1..]),
        None if backgroundish => (&[], &toks[..]),
        None => (&toks[..], &[]),
    };
    let mut out = PromptAttributes::default();
    for t in front {
        if let Ok(c) = t.parse::<ColorName>() {
            out.protagonist_color.get_or_insert(c);
        }
        let singular = t.strip_suffix('s').unwrap_or(t);
        if let Ok(s) = t.parse::<Shape>().or_else(|_| singular.parse::<Shape>()) {
            out.shape.get_or_insert(s);
        }
    }
    for t in back {
        if let Ok(c) = t.parse::<ColorName>() {
            out.background_color.get_or_insert(c);
        }
        if let Some(s) = style_word(t) {
            out.style.get_or_insert(s);
        }
    }
    if out.style.is_none() && back.iter().any(|t| t == "background") {
        out.style = Some(BackgroundStyle::Solid);
    }
    out
}

/// Analytic stand-in for a learned text-to-image prior: renders the
/// prompted content canonically and embeds the render.
///
/// Protagonist-only prompts embed the masked canonical shape; background-only
/// prompts embed a full-frame background; prompts with both embed the full
/// composite frame. Missing colors or shapes fall back to
/// [`DEFAULT_PRIOR_COLOR`] and [`DEFAULT_PRIOR_SHAPE`].
pub fn prior_convert(prompt: &str, resolution: usize) -> Result<Embedding> {
    let attrs = parse_prompt(prompt);
    if !attrs.has_protagonist() && !attrs.has_background() {
        return Err(Error::Expert(format!("prompt {prompt:?} contains no vocabulary word")));
    }
    let background = attrs.has_background().then(|| BackgroundSpec {
        style: attrs.style.unwrap_or(BackgroundStyle::Solid),
        color: attrs.background_color.unwrap_or(DEFAULT_PRIOR_COLOR),
    });
    let protagonist = attrs.has_protagonist().then(|| {
        canonical_render(
            attrs.shape.unwrap_or(DEFAULT_PRIOR_SHAPE),
            attrs.protagonist_color.unwrap_or(DEFAULT_PRIOR_COLOR),
            resolution,
        )
    });
    match (protagonist, background) {
        (Some((image, mask)), None) => embed_image(image.view(), Some(mask.view())),
        (None, Some(bg)) => embed_image(render_background(bg, resolution).view(), None),
        (Some((image, mask)), Some(bg)) => {
            let mut frame = render_background(bg, resolution);
            for ((c, y, x), v) in image.indexed_iter() {
                if mask[[y, x]] > 0.0 {
                    frame[[c, y, x]] = *v;
                }
            }
            embed_image(frame.view(), None)
        }
        (None, None) => unreachable!("checked above"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_bins_partition_unity() {
        for i in 0..=40 {
            let v = -1.0 + i as f64 * 0.05;
            let w = soft_bins(v);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(soft_bins(1.0), [0.0, 0.0, 1.0]);
        assert_eq!(soft_bins(-1.0), [1.0, 0.0, 0.0]);
        assert_eq!(soft_bins(0.0), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn text_dims_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        let words = ColorName::ALL
            .iter()
            .map(|c| c.word())
            .chain(Shape::ALL.iter().map(|s| s.word()))
            .chain(BackgroundStyle::ALL.iter().map(|s| s.word()))
            .chain(Direction::ALL.iter().map(|d| d.word()));
        for w in words {
            let d = text_dim(w).unwrap();
            assert!(d < EMBED_DIM);
            assert!(seen.insert(d), "{w} reuses dim {d}");
        }
    }

    #[test]
    fn prompt_parsing_splits_at_on() {
        let a = parse_prompt("a blue circle on a striped background");
        assert_eq!(a.protagonist_color, Some(ColorName::Blue));
        assert_eq!(a.shape, Some(Shape::Circle));
        assert_eq!(a.style, Some(BackgroundStyle::Stripes));
        assert_eq!(a.background_color, None);
        let b = parse_prompt("solid green background");
        assert!(!b.has_protagonist());
        assert_eq!(b.background_color, Some(ColorName::Green));
        let c = parse_prompt("red square");
        assert!(!c.has_background());
    }
}
