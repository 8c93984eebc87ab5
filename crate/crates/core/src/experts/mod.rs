//! Expert interfaces (captioning, question answering, segmentation, tracking,
//! embedding, prior conversion, control extraction) and their oracle
//! implementations for the synthetic corpus.

mod control;
mod embed;
mod oracle;
mod segment;

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::SceneDescriptor;
use crate::video::{Embedding, Mask, VideoTensor};

pub use control::{sobel_control, ControlVolume};
pub use embed::{
    bin_index, embed_image, embed_text, parse_prompt, prior_convert, shape_moments, soft_histogram, tokens,
    PromptAttributes, TextEmbedding, DEFAULT_PRIOR_COLOR, DEFAULT_PRIOR_SHAPE, HISTOGRAM_BINS, MOMENT_WEIGHT,
};
pub use oracle::{
    OracleCaptioner, OracleControl, OraclePrior, OracleSegmenter, OracleTextEmbedder, OracleTracker,
    OracleVisionEmbedder, OracleVqa,
};
pub use segment::{
    connected_components, describe_region, parse_phrase, segment_by_phrase, segment_salient, track_by_color,
    Component, Segmentation, Track,
};

/// A source video plus the scene descriptor sidecar, when one exists.
#[derive(Debug, Clone, Copy)]
pub struct SourceClip<'a> {
    pub video: &'a VideoTensor,
    pub descriptor: Option<&'a SceneDescriptor>,
}

pub trait Captioner: Send + Sync {
    fn caption(&self, clip: SourceClip<'_>) -> Result<String>;
}

pub trait ProtagonistVqa: Send + Sync {
    /// One noun phrase per protagonist, in z-order.
    fn answer_protagonist(&self, clip: SourceClip<'_>) -> Result<Vec<String>>;
}

pub trait Segmenter: Send + Sync {
    fn segment_first_frame(&self, frame: ArrayView3<'_, f64>, phrase: &str) -> Result<Segmentation>;
    /// Mask of the main object of a reference image.
    fn segment_reference(&self, image: ArrayView3<'_, f64>) -> Result<Segmentation>;
    /// Vocabulary phrase for a masked reference object, if it can name one.
    fn describe(&self, image: ArrayView3<'_, f64>, mask: ArrayView2<'_, f64>) -> Option<String>;
}

pub trait Tracker: Send + Sync {
    fn track_masks(&self, video: &VideoTensor, first_mask: &Mask) -> Result<Track>;
}

pub trait VisionEmbedder: Send + Sync {
    fn embed_image(&self, image: ArrayView3<'_, f64>, mask: Option<ArrayView2<'_, f64>>) -> Result<Embedding>;
}

pub trait TextEmbedder: Send + Sync {
    fn embed_text(&self, prompt: &str) -> TextEmbedding;
}

pub trait PriorConverter: Send + Sync {
    fn prior_convert(&self, prompt: &str) -> Result<Embedding>;
}

pub trait ControlExtractor: Send + Sync {
    fn extract_control(&self, video: &VideoTensor) -> ControlVolume;
}

/// Names an implementation per expert slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertConfig {
    pub captioner: String,
    pub protagonist_vqa: String,
    pub segmenter: String,
    pub tracker: String,
    pub vision_embedder: String,
    pub text_embedder: String,
    pub prior_converter: String,
    pub control_extractor: String,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        let o = || "oracle".to_string();
        Self {
            captioner: o(),
            protagonist_vqa: o(),
            segmenter: o(),
            tracker: o(),
            vision_embedder: o(),
            text_embedder: o(),
            prior_converter: o(),
            control_extractor: o(),
        }
    }
}

/// One implementation per expert slot.
pub struct ExpertRegistry {
    pub captioner: Box<dyn Captioner>,
    pub protagonist_vqa: Box<dyn ProtagonistVqa>,
    pub segmenter: Box<dyn Segmenter>,
    pub tracker: Box<dyn Tracker>,
    pub vision_embedder: Box<dyn VisionEmbedder>,
    pub text_embedder: Box<dyn TextEmbedder>,
    pub prior_converter: Box<dyn PriorConverter>,
    pub control_extractor: Box<dyn ControlExtractor>,
}

impl ExpertRegistry {
    /// All slots filled with the synthetic oracles for `resolution`-pixel frames.
    pub fn oracle(resolution: usize) -> Self {
        Self {
            captioner: Box::new(OracleCaptioner),
            protagonist_vqa: Box::new(OracleVqa),
            segmenter: Box::new(OracleSegmenter),
            tracker: Box::new(OracleTracker),
            vision_embedder: Box::new(OracleVisionEmbedder),
            text_embedder: Box::new(OracleTextEmbedder),
            prior_converter: Box::new(OraclePrior { resolution }),
            control_extractor: Box::new(OracleControl),
        }
    }

    pub fn from_config(config: &ExpertConfig, resolution: usize) -> Result<Self> {
        let slots: BTreeMap<&str, &str> = [
            ("captioner", config.captioner.as_str()),
            ("protagonist_vqa", config.protagonist_vqa.as_str()),
            ("segmenter", config.segmenter.as_str()),
            ("tracker", config.tracker.as_str()),
            ("vision_embedder", config.vision_embedder.as_str()),
            ("text_embedder", config.text_embedder.as_str()),
            ("prior_converter", config.prior_converter.as_str()),
            ("control_extractor", config.control_extractor.as_str()),
        ]
        .into_iter()
        .collect();
        for (slot, key) in &slots {
            if *key != "oracle" {
                return Err(Error::Invalid(format!(
                    "expert slot {slot}: unknown implementation {key:?} (available: oracle)"
                )));
            }
        }
        Ok(Self::oracle(resolution))
    }

    pub fn from_config_file(path: &Path, resolution: usize) -> Result<Self> {
        let config: ExpertConfig = crate::io::read_json(path)?;
        Self::from_config(&config, resolution)
    }
}
