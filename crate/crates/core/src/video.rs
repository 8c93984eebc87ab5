//! Value types shared by every stage: videos, masks and embeddings.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Length of every visual and textual embedding.
pub const EMBED_DIM: usize = 32;

/// Frames × channels × height × width. Decoded video lives in [-1, 1];
/// the autoencoder is the identity so this type also holds latents.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoTensor {
    data: Array4<f64>,
    frame_rate: u32,
}

impl VideoTensor {
    pub const DEFAULT_FRAME_RATE: u32 = 8;

    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.shape().iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("empty video {:?}", data.shape())));
        }
        Ok(Self {
            data: data.as_standard_layout().into_owned(),
            frame_rate: Self::DEFAULT_FRAME_RATE,
        })
    }

    pub fn zeros(frames: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array4::zeros((frames, channels, height, width)),
            frame_rate: Self::DEFAULT_FRAME_RATE,
        }
    }

    pub fn with_frame_rate(mut self, frame_rate: u32) -> Self {
        self.frame_rate = frame_rate;
        self
    }

    pub fn frame_rate(&self) -> u32 {
        self.frame_rate
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn frame(&self, f: usize) -> ArrayView3<'_, f64> {
        self.data.index_axis(Axis(0), f)
    }

    pub fn ensure_same_shape(&self, other: &VideoTensor, what: &str) -> Result<()> {
        if self.data.shape() != other.data.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.data.shape(),
                other.data.shape()
            )));
        }
        Ok(())
    }

    /// Elementwise combination of two equally shaped videos.
    pub fn zip_with(
        &self,
        other: &VideoTensor,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<VideoTensor> {
        self.ensure_same_shape(other, what)?;
        let data = Zip::from(&self.data)
            .and(&other.data)
            .map_collect(|&a, &b| f(a, b));
        Ok(VideoTensor {
            data,
            frame_rate: self.frame_rate,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> VideoTensor {
        VideoTensor {
            data: self.data.mapv(f),
            frame_rate: self.frame_rate,
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Root-mean-square difference over all elements.
    pub fn rms_diff(&self, other: &VideoTensor) -> Result<f64> {
        self.ensure_same_shape(other, "rms_diff")?;
        let n = self.data.len() as f64;
        let ss: f64 = Zip::from(&self.data)
            .and(&other.data)
            .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
        Ok((ss / n).sqrt())
    }

    pub fn clamped(&self) -> VideoTensor {
        self.map(|v| v.clamp(-1.0, 1.0))
    }
}

/// A single-frame mask, H × W.
pub type Mask = Array2<f64>;

/// Per-frame protagonist masks, F × H × W, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    data: Array3<f64>,
}

impl MaskVolume {
    /// Builds a volume, clamping every value into [0, 1].
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.shape().iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("empty mask volume {:?}", data.shape())));
        }
        let data = data.mapv(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        Ok(Self { data })
    }

    pub fn from_frames(frames: &[Mask]) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Shape("mask volume needs at least one frame".into()))?;
        let (h, w) = first.dim();
        let mut data = Array3::zeros((frames.len(), h, w));
        for (f, m) in frames.iter().enumerate() {
            if m.dim() != (h, w) {
                return Err(Error::Shape(format!("mask frame {f} is {:?}", m.dim())));
            }
            data.index_axis_mut(Axis(0), f).assign(m);
        }
        Self::new(data)
    }

    pub fn constant(frames: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array3::from_elem((frames, height, width), value))
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn frame(&self, f: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), f)
    }

    /// Sum of mask values in frame `f`.
    pub fn area(&self, f: usize) -> f64 {
        self.frame(f).sum()
    }

    pub fn matches_video(&self, video: &VideoTensor) -> bool {
        self.frames() == video.frames()
            && self.height() == video.height()
            && self.width() == video.width()
    }

    pub fn ensure_matches(&self, video: &VideoTensor) -> Result<()> {
        if !self.matches_video(video) {
            return Err(Error::Shape(format!(
                "mask {:?} does not align with video {:?}",
                self.data.shape(),
                video.shape()
            )));
        }
        Ok(())
    }

    /// Pixelwise sum of several masks. Errors if the sum exceeds one anywhere.
    pub fn union(masks: &[MaskVolume]) -> Result<MaskVolume> {
        let first = masks
            .first()
            .ok_or_else(|| Error::Invalid("at least one mask is required".into()))?;
        let mut total = Array3::<f64>::zeros(first.data.raw_dim());
        for m in masks {
            if m.data.shape() != first.data.shape() {
                return Err(Error::Shape("protagonist masks differ in shape".into()));
            }
            total += &m.data;
        }
        if total.iter().any(|&v| v > 1.0 + 1e-9) {
            return Err(Error::Invalid("protagonist masks overlap (sum exceeds 1)".into()));
        }
        Ok(MaskVolume {
            data: total.mapv(|v| v.min(1.0)),
        })
    }

    /// Intersection over union against another volume, treating values ≥ 0.5 as inside.
    pub fn iou(&self, other: &MaskVolume) -> f64 {
        let mut inter = 0usize;
        let mut uni = 0usize;
        Zip::from(&self.data).and(&other.data).for_each(|&a, &b| {
            let (a, b) = (a >= 0.5, b >= 0.5);
            inter += (a && b) as usize;
            uni += (a || b) as usize;
        });
        if uni == 0 {
            1.0
        } else {
            inter as f64 / uni as f64
        }
    }
}

/// Which space an embedding lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSpace {
    Visual,
    Textual,
}

/// A unit-norm vector of length [`EMBED_DIM`].
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    data: Array1<f64>,
    space: EmbeddingSpace,
}

impl Embedding {
    /// Normalizes `data` to unit length.
    pub fn new(data: Array1<f64>, space: EmbeddingSpace) -> Result<Self> {
        if data.len() != EMBED_DIM {
            return Err(Error::Shape(format!(
                "embedding has {} dims, expected {EMBED_DIM}",
                data.len()
            )));
        }
        let norm = data.dot(&data).sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Invalid("embedding has zero or non-finite norm".into()));
        }
        Ok(Self {
            data: data / norm,
            space,
        })
    }

    pub fn data(&self) -> ArrayView1<'_, f64> {
        self.data.view()
    }

    pub fn space(&self) -> EmbeddingSpace {
        self.space
    }

    pub fn cosine(&self, other: &Embedding) -> f64 {
        self.data.dot(&other.data)
    }
}

/// One embedding per frame, or a single row broadcast over all frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbeddings {
    rows: Array2<f64>,
}

impl FrameEmbeddings {
    pub fn single(e: &Embedding) -> Self {
        Self {
            rows: e.data.clone().insert_axis(Axis(0)),
        }
    }

    pub fn per_frame(embeddings: &[Embedding]) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::Invalid("no frame embeddings".into()));
        }
        let mut rows = Array2::zeros((embeddings.len(), EMBED_DIM));
        for (i, e) in embeddings.iter().enumerate() {
            rows.row_mut(i).assign(&e.data);
        }
        Ok(Self { rows })
    }

    /// Builds from raw rows; each row is normalized to unit length.
    pub fn from_rows(rows: Array2<f64>) -> Result<Self> {
        let embeddings = rows
            .rows()
            .into_iter()
            .map(|r| Embedding::new(r.to_owned(), EmbeddingSpace::Visual))
            .collect::<Result<Vec<_>>>()?;
        Self::per_frame(&embeddings)
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn is_broadcast(&self) -> bool {
        self.rows.nrows() == 1
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    /// The embedding for frame `f`, broadcasting a single row.
    pub fn row(&self, f: usize) -> ArrayView1<'_, f64> {
        if self.is_broadcast() {
            self.rows.row(0)
        } else {
            self.rows.row(f)
        }
    }

    pub fn ensure_frames(&self, frames: usize) -> Result<()> {
        if self.is_broadcast() || self.len() == frames {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{} frame embeddings for a {frames}-frame video",
                self.len()
            )))
        }
    }
}
