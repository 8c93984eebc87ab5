//! Oracle experts: linguistic experts read the scene descriptor, visual
//! experts work on pixels with the color rules of the synthetic corpus.

use ndarray::{ArrayView2, ArrayView3};

use super::control::{sobel_control, ControlVolume};
use super::embed::{embed_image, embed_text, prior_convert, TextEmbedding};
use super::segment::{describe_region, segment_by_phrase, segment_salient, track_by_color, Segmentation, Track};
use super::{
    Captioner, ControlExtractor, PriorConverter, ProtagonistVqa, Segmenter, SourceClip, TextEmbedder, Tracker,
    VisionEmbedder,
};
use crate::error::{Error, Result};
use crate::synthdata::{Direction, ProtagonistSpec, SceneDescriptor};
use crate::video::{Embedding, Mask, VideoTensor};

fn descriptor<'a>(clip: SourceClip<'a>, who: &str) -> Result<&'a SceneDescriptor> {
    clip.descriptor
        .ok_or_else(|| Error::Expert(format!("oracle {who} needs descriptor")))
}

fn noun_phrase(p: &ProtagonistSpec) -> String {
    match p.trajectory.direction() {
        Direction::Still => format!("a {} standing still", p.phrase()),
        d => format!("a {} moving {}", p.phrase(), d.word()),
    }
}

pub struct OracleCaptioner;

impl Captioner for OracleCaptioner {
    fn caption(&self, clip: SourceClip<'_>) -> Result<String> {
        let d = descriptor(clip, "captioner")?;
        let subjects: Vec<String> = d.protagonists.iter().map(noun_phrase).collect();
        Ok(format!("{} on a {} background", subjects.join(" and "), d.background.style))
    }
}

pub struct OracleVqa;

impl ProtagonistVqa for OracleVqa {
    fn answer_protagonist(&self, clip: SourceClip<'_>) -> Result<Vec<String>> {
        let d = descriptor(clip, "protagonist vqa")?;
        Ok(d.protagonists.iter().map(ProtagonistSpec::phrase).collect())
    }
}

pub struct OracleSegmenter;

impl Segmenter for OracleSegmenter {
    fn segment_first_frame(&self, frame: ArrayView3<'_, f64>, phrase: &str) -> Result<Segmentation> {
        segment_by_phrase(frame, phrase)
    }

    fn segment_reference(&self, image: ArrayView3<'_, f64>) -> Result<Segmentation> {
        Ok(segment_salient(image))
    }

    fn describe(&self, image: ArrayView3<'_, f64>, mask: ArrayView2<'_, f64>) -> Option<String> {
        describe_region(image, mask)
    }
}

pub struct OracleTracker;

impl Tracker for OracleTracker {
    fn track_masks(&self, video: &VideoTensor, first_mask: &Mask) -> Result<Track> {
        track_by_color(video, first_mask.view())
    }
}

pub struct OracleVisionEmbedder;

impl VisionEmbedder for OracleVisionEmbedder {
    fn embed_image(&self, image: ArrayView3<'_, f64>, mask: Option<ArrayView2<'_, f64>>) -> Result<Embedding> {
        embed_image(image, mask)
    }
}

pub struct OracleTextEmbedder;

impl TextEmbedder for OracleTextEmbedder {
    fn embed_text(&self, prompt: &str) -> TextEmbedding {
        embed_text(prompt)
    }
}

pub struct OraclePrior {
    pub resolution: usize,
}

impl PriorConverter for OraclePrior {
    fn prior_convert(&self, prompt: &str) -> Result<Embedding> {
        prior_convert(prompt, self.resolution)
    }
}

pub struct OracleControl;

impl ControlExtractor for OracleControl {
    fn extract_control(&self, video: &VideoTensor) -> ControlVolume {
        sobel_control(video)
    }
}
