//! Inference orchestration: read the source with the experts, assemble the
//! visual and textual clues for the chosen mode, invert and resample.

use std::path::Path;

use ndarray::{Array1, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{source_hash, Checkpoint};
use crate::denoiser::{spatialize_embedding, ConditioningBundle, Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::experts::{ControlVolume, ExpertRegistry, SourceClip};
use crate::metrics::{background_preservation, prompt_fidelity, subject_fidelity, MetricTriple};
use crate::rng::seeded_rng;
use crate::sampling::{ddim_invert, ddim_sample, mask_guided_sample, FusionConfig, MaskDownsample, TraceStep};
use crate::schedules::NoiseSchedule;
use crate::synthdata::SceneDescriptor;
use crate::training::{train_on_video, TrainConfig, TrainOutcome, TrainingSet};
use crate::video::{Embedding, EmbeddingSpace, FrameEmbeddings, MaskVolume, VideoTensor, EMBED_DIM};

/// What an edit changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    /// New protagonist from reference images, source background kept.
    Protagonist,
    /// New background from the prompt, source protagonist kept.
    Background,
    /// Protagonist from references and background from the prompt.
    Text2Video,
    /// Nothing: invert and resample with the source conditioning.
    Reconstruct,
}

impl std::str::FromStr for EditMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "protagonist" => Ok(Self::Protagonist),
            "background" => Ok(Self::Background),
            "text2video" => Ok(Self::Text2Video),
            "reconstruct" => Ok(Self::Reconstruct),
            _ => Err(Error::Invalid(format!(
                "unknown mode {s:?} (expected protagonist, background, text2video or reconstruct)"
            ))),
        }
    }
}

/// A component switched off for ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Control map replaced by zeros.
    NoControl,
    /// I_P replaced by a fixed random projection of the text embedding.
    NoPrior,
    /// Reference-only field at every step.
    NoFeatureFusion,
    /// Only the fused branch is sampled.
    NoLatentFusion,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::None,
        Ablation::NoControl,
        Ablation::NoPrior,
        Ablation::NoFeatureFusion,
        Ablation::NoLatentFusion,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Ablation::None => "full",
            Ablation::NoControl => "w.o. control",
            Ablation::NoPrior => "w.o. prior",
            Ablation::NoFeatureFusion => "w.o. feature fusion",
            Ablation::NoLatentFusion => "w.o. latent fusion",
        }
    }
}

/// Optional replacements for the sampler defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionOverrides {
    pub tau_f: Option<usize>,
    pub tau_l: Option<usize>,
    pub guidance: Option<f64>,
    pub n_steps: Option<usize>,
    pub mask_downsample: Option<MaskDownsample>,
}

#[derive(Debug, Clone)]
pub struct EditRequest {
    pub mode: EditMode,
    /// One image `[3, H, W]` per protagonist to replace, in protagonist order.
    pub reference_images: Vec<Array3<f64>>,
    /// Background prompt for background/text2video; in protagonist mode a
    /// prompt, when given, replaces the substituted caption verbatim.
    pub prompt: Option<String>,
    pub overrides: FusionOverrides,
    pub ablation: Ablation,
    pub seed: u64,
}

impl EditRequest {
    pub fn new(mode: EditMode) -> Self {
        Self {
            mode,
            reference_images: Vec::new(),
            prompt: None,
            overrides: FusionOverrides::default(),
            ablation: Ablation::None,
            seed: 0,
        }
    }

    pub fn with_references(mut self, images: Vec<Array3<f64>>) -> Self {
        self.reference_images = images;
        self
    }

    pub fn with_prompt(mut self, prompt: &str) -> Self {
        self.prompt = Some(prompt.to_string());
        self
    }

    fn validate(&self, protagonists: usize) -> Result<()> {
        let needs_refs = matches!(self.mode, EditMode::Protagonist | EditMode::Text2Video);
        if needs_refs && self.reference_images.is_empty() {
            return Err(Error::Invalid(format!("{:?} mode needs at least one reference image", self.mode)));
        }
        if self.reference_images.len() > protagonists {
            return Err(Error::Invalid(format!(
                "{} reference images for {} protagonists",
                self.reference_images.len(),
                protagonists
            )));
        }
        let needs_prompt = matches!(self.mode, EditMode::Background | EditMode::Text2Video);
        if needs_prompt && self.prompt.is_none() {
            return Err(Error::Invalid(format!("{:?} mode needs a prompt", self.mode)));
        }
        Ok(())
    }
}

/// Everything the experts read off the source clip.
#[derive(Debug, Clone)]
pub struct ParsedSource {
    pub video: VideoTensor,
    pub caption: String,
    pub protagonist_phrases: Vec<String>,
    pub masks: Vec<MaskVolume>,
    pub control: ControlVolume,
    pub per_frame_embeddings: FrameEmbeddings,
    pub warnings: Vec<String>,
}

/// Caption, protagonist phrases, tracked masks, control and per-frame embeddings.
pub fn parse_source(video: &VideoTensor, descriptor: Option<&SceneDescriptor>, experts: &ExpertRegistry) -> Result<ParsedSource> {
    let clip = SourceClip { video, descriptor };
    let caption = experts.captioner.caption(clip)?;
    let phrases = experts.protagonist_vqa.answer_protagonist(clip)?;
    let mut masks = Vec::with_capacity(phrases.len());
    let mut warnings = Vec::new();
    for phrase in &phrases {
        let seg = experts.segmenter.segment_first_frame(video.frame(0), phrase)?;
        if seg.empty {
            return Err(Error::Expert(format!("segmentation found nothing for {phrase:?}")));
        }
        let track = experts.tracker.track_masks(video, &seg.mask)?;
        if !track.lost_frames.is_empty() {
            let w = format!("tracker lost {phrase:?} in frames {:?}", track.lost_frames);
            log::warn!("{w}");
            warnings.push(w);
        }
        masks.push(track.masks);
    }
    let control = experts.control_extractor.extract_control(video);
    let rows = (0..video.frames())
        .map(|f| experts.vision_embedder.embed_image(video.frame(f), None))
        .collect::<Result<Vec<_>>>()?;
    Ok(ParsedSource {
        video: video.clone(),
        caption,
        protagonist_phrases: phrases,
        masks,
        control,
        per_frame_embeddings: FrameEmbeddings::per_frame(&rows)?,
        warnings,
    })
}

/// Reads the frames, and `scene.json` when present, from a scene directory.
pub fn parse_source_dir(dir: &Path, experts: &ExpertRegistry) -> Result<ParsedSource> {
    let video = crate::io::load_video(dir)?;
    let scene_json = dir.join("scene.json");
    let descriptor: Option<SceneDescriptor> = if scene_json.exists() {
        Some(crate::io::read_json(&scene_json)?)
    } else {
        None
    };
    parse_source(&video, descriptor.as_ref(), experts)
}

/// Fine-tunes a fresh denoiser on the parsed clip, caption and masks.
///
/// The model is initialised from `train.seed` and its frame count and
/// resolution follow the clip.
pub fn fine_tune(
    parsed: &ParsedSource,
    model: DenoiserConfig,
    train: &TrainConfig,
    sched: &NoiseSchedule,
    experts: &ExpertRegistry,
) -> Result<(Checkpoint, TrainOutcome)> {
    let cfg = DenoiserConfig {
        frames: parsed.video.frames(),
        resolution: parsed.video.height(),
        train_steps: sched.train_steps(),
        ..model
    };
    let data = TrainingSet::new(
        &parsed.video,
        &parsed.caption,
        &parsed.masks,
        Some(parsed.control.clone()),
        experts,
        &cfg,
        train.color_augmentation,
    )?;
    let mut denoiser = Denoiser::new(cfg, &mut seeded_rng(train.seed))?;
    let outcome = train_on_video(&mut denoiser, &data, sched, train)?;
    let checkpoint = Checkpoint::new(denoiser, Some(train.clone()), &source_hash(&parsed.video));
    Ok((checkpoint, outcome))
}

/// Visual clues for one edit.
#[derive(Debug, Clone)]
pub struct Clues {
    pub protagonist_embeddings: Vec<FrameEmbeddings>,
    pub background_embedding: FrameEmbeddings,
    pub masks: Vec<MaskVolume>,
    /// Vocabulary phrase for each reference object, when the segmenter can name it.
    pub reference_phrases: Vec<Option<String>>,
    /// Masked embedding of each reference object.
    pub references: Vec<Embedding>,
}

fn embed_reference(image: &Array3<f64>, experts: &ExpertRegistry) -> Result<(Embedding, Option<String>)> {
    let seg = experts.segmenter.segment_reference(image.view())?;
    if seg.empty {
        return Err(Error::Expert("no object found in reference image".into()));
    }
    let e = experts.vision_embedder.embed_image(image.view(), Some(seg.mask.view()))?;
    Ok((e, experts.segmenter.describe(image.view(), seg.mask.view())))
}

/// Fixed seeded linear map from text space to image space, standing in for
/// a missing prior.
pub fn text_projection(text: &Embedding, seed: u64) -> Result<Embedding> {
    let mut rng = seeded_rng(seed ^ 0x7072_696f_72);
    let mut out = Array1::zeros(EMBED_DIM);
    for o in out.iter_mut() {
        let mut acc = 0.0;
        for &x in text.data() {
            let w: f64 = rng.sample(StandardNormal);
            acc += w * x;
        }
        *o = acc;
    }
    Embedding::new(out, EmbeddingSpace::Visual)
}

/// I_R per protagonist, I_P and masks for the request's mode.
pub fn prepare_clues(request: &EditRequest, parsed: &ParsedSource, experts: &ExpertRegistry) -> Result<Clues> {
    request.validate(parsed.masks.len())?;
    let source_rows = parsed.per_frame_embeddings.clone();
    let prior = |prompt: &str| -> Result<FrameEmbeddings> {
        let e = if request.ablation == Ablation::NoPrior {
            text_projection(&experts.text_embedder.embed_text(prompt).embedding, request.seed)?
        } else {
            experts.prior_converter.prior_convert(prompt)?
        };
        Ok(FrameEmbeddings::single(&e))
    };
    let mut references = Vec::new();
    let mut reference_phrases = Vec::new();
    for image in &request.reference_images {
        let (e, phrase) = embed_reference(image, experts)?;
        references.push(e);
        reference_phrases.push(phrase);
    }
    let clue = |protagonists: Vec<FrameEmbeddings>, background: FrameEmbeddings, masks: Vec<MaskVolume>| Clues {
        protagonist_embeddings: protagonists,
        background_embedding: background,
        masks,
        reference_phrases: reference_phrases.clone(),
        references: references.clone(),
    };
    let edited_masks = || parsed.masks[..references.len()].to_vec();
    let reference_rows = || references.iter().map(FrameEmbeddings::single).collect::<Vec<_>>();
    Ok(match request.mode {
        EditMode::Protagonist => clue(reference_rows(), source_rows, edited_masks()),
        EditMode::Text2Video => clue(reference_rows(), prior(request.prompt.as_deref().unwrap_or_default())?, edited_masks()),
        EditMode::Background => {
            let k = parsed.masks.len().max(1);
            let masks = if parsed.masks.is_empty() {
                vec![MaskVolume::constant(
                    parsed.video.frames(),
                    parsed.video.height(),
                    parsed.video.width(),
                    0.0,
                )?]
            } else {
                parsed.masks.clone()
            };
            clue(vec![source_rows; k], prior(request.prompt.as_deref().unwrap_or_default())?, masks)
        }
        EditMode::Reconstruct => clue(Vec::new(), source_rows, Vec::new()),
    })
}

/// The part of a prompt describing the background, starting at "on".
fn background_clause(prompt: &str) -> String {
    let lower = prompt.trim().to_lowercase();
    if let Some(i) = lower.find(" on ") {
        return lower[i + 1..].to_string();
    }
    if lower.starts_with("on ") {
        return lower;
    }
    format!("on {lower}")
}

/// Source caption with edited protagonist phrases substituted and, when
/// given, the background clause replaced.
pub fn edited_text(caption: &str, replacements: &[(String, String)], background: Option<&str>) -> String {
    let mut text = caption.to_string();
    for (from, to) in replacements {
        if let Some(i) = text.find(from.as_str()) {
            text.replace_range(i..i + from.len(), to);
        }
    }
    if let Some(prompt) = background {
        let clause = background_clause(prompt);
        text = match text.rfind(" on ") {
            Some(i) => format!("{} {clause}", &text[..i]),
            None => format!("{text} {clause}"),
        };
    }
    text
}

fn text_for(request: &EditRequest, parsed: &ParsedSource, clues: &Clues) -> String {
    let replacements: Vec<(String, String)> = parsed
        .protagonist_phrases
        .iter()
        .zip(&clues.reference_phrases)
        .filter_map(|(from, to)| to.as_ref().map(|to| (from.clone(), to.clone())))
        .collect();
    match request.mode {
        EditMode::Reconstruct => parsed.caption.clone(),
        EditMode::Protagonist => match &request.prompt {
            Some(p) => p.clone(),
            None => edited_text(&parsed.caption, &replacements, None),
        },
        EditMode::Background => edited_text(&parsed.caption, &[], request.prompt.as_deref()),
        EditMode::Text2Video => edited_text(&parsed.caption, &replacements, request.prompt.as_deref()),
    }
}

/// Conditioning the source was trained with: caption, per-frame whole-frame field, control.
pub fn source_conditioning(parsed: &ParsedSource, experts: &ExpertRegistry, resolutions: &[usize]) -> Result<ConditioningBundle> {
    Ok(ConditioningBundle {
        text: Some(experts.text_embedder.embed_text(&parsed.caption).embedding),
        image_field: spatialize_embedding(&parsed.per_frame_embeddings, parsed.video.frames(), resolutions)?,
        control: Some(parsed.control.clone()),
    })
}

/// Everything persisted alongside an edited clip.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditReport {
    pub mode: EditMode,
    pub ablation: Ablation,
    pub text: String,
    pub prompt: Option<String>,
    pub tau_f: usize,
    pub tau_l: usize,
    pub guidance: f64,
    pub n_steps: usize,
    pub seed: u64,
    pub metrics: MetricTriple,
    /// Subject fidelity per edited protagonist, against its reference.
    pub subject_fidelity_per_protagonist: Vec<f64>,
    pub warnings: Vec<String>,
    pub trace: Vec<TraceStep>,
}

pub struct EditOutcome {
    pub video: VideoTensor,
    pub report: EditReport,
}

/// Inverts the source with its own conditioning, then samples with the
/// request's clues. The checkpoint must have been fine-tuned on this source.
pub fn edit(
    request: &EditRequest,
    checkpoint: &Checkpoint,
    parsed: &ParsedSource,
    sched: &NoiseSchedule,
    experts: &ExpertRegistry,
) -> Result<EditOutcome> {
    checkpoint.ensure_source(&parsed.video)?;
    let model = &checkpoint.model;
    let train_steps = sched.train_steps();
    let clues = prepare_clues(request, parsed, experts)?;
    let text_prompt = text_for(request, parsed, &clues);
    let text = experts.text_embedder.embed_text(&text_prompt).embedding;
    let resolutions = model.config().level_resolutions();
    let source_cond = source_conditioning(parsed, experts, &resolutions)?;
    let o = &request.overrides;
    let control = match request.ablation {
        Ablation::NoControl => ControlVolume::zeros(parsed.video.frames(), parsed.video.height(), parsed.video.width()),
        _ => parsed.control.clone(),
    };
    let n_steps = o.n_steps.unwrap_or(crate::schedules::DEFAULT_SAMPLING_STEPS);
    let z_t = ddim_invert(&parsed.video, &source_cond, model, sched, n_steps)?;
    let (video, fusion, trace) = if request.mode == EditMode::Reconstruct {
        let guidance = o.guidance.unwrap_or(1.0);
        let cond = ConditioningBundle {
            control: Some(control),
            ..source_cond
        };
        let video = ddim_sample(&z_t, &cond, model, sched, n_steps, guidance)?;
        let mut fusion = FusionConfig::new(Vec::new(), Vec::new(), parsed.per_frame_embeddings.clone(), train_steps);
        fusion.guidance = guidance;
        fusion.n_steps = n_steps;
        (video, fusion, Vec::new())
    } else {
        let mut fusion = FusionConfig::new(
            clues.masks.clone(),
            clues.protagonist_embeddings.clone(),
            clues.background_embedding.clone(),
            train_steps,
        );
        fusion.tau_f = o.tau_f.unwrap_or(fusion.tau_f);
        fusion.tau_l = o.tau_l.unwrap_or(fusion.tau_l);
        fusion.guidance = o.guidance.unwrap_or(fusion.guidance);
        fusion.n_steps = n_steps;
        fusion.mask_downsample = o.mask_downsample.unwrap_or(fusion.mask_downsample);
        match request.ablation {
            Ablation::NoFeatureFusion => fusion.tau_f = train_steps + 1,
            Ablation::NoLatentFusion => fusion.latent_fusion = false,
            _ => {}
        }
        let out = mask_guided_sample(&z_t, model, sched, Some(&text), Some(&control), &fusion)?;
        (out.video, fusion, out.trace)
    };
    let video = video.clamped();
    let per_protagonist = clues
        .references
        .iter()
        .zip(&clues.masks)
        .map(|(r, m)| subject_fidelity(&video, r, m, experts))
        .collect::<Result<Vec<_>>>()?;
    let subject = if per_protagonist.is_empty() {
        let rows = &parsed.per_frame_embeddings;
        let mut total = 0.0;
        for f in 0..video.frames() {
            let e = experts.vision_embedder.embed_image(video.frame(f), None)?;
            let r = Embedding::new(rows.row(f).to_owned(), EmbeddingSpace::Visual)?;
            total += e.cosine(&r);
        }
        total / video.frames() as f64
    } else {
        per_protagonist.iter().sum::<f64>() / per_protagonist.len() as f64
    };
    let fidelity_prompt = request.prompt.clone().unwrap_or_else(|| text_prompt.clone());
    let prompt_score = match prompt_fidelity(&video, &fidelity_prompt, experts) {
        Ok(s) => s,
        Err(e) if !e.is_numerical() && request.mode != EditMode::Background && request.mode != EditMode::Text2Video => {
            log::warn!("prompt fidelity unavailable: {e}");
            f64::NAN
        }
        Err(e) => return Err(e),
    };
    let metrics = MetricTriple {
        prompt_fidelity: prompt_score,
        subject_fidelity: subject,
        background_preservation: background_preservation(&video, &parsed.video, &clues.masks)?,
    };
    Ok(EditOutcome {
        video,
        report: EditReport {
            mode: request.mode,
            ablation: request.ablation,
            text: text_prompt,
            prompt: request.prompt.clone(),
            tau_f: fusion.tau_f,
            tau_l: fusion.tau_l,
            guidance: fusion.guidance,
            n_steps,
            seed: request.seed,
            metrics,
            subject_fidelity_per_protagonist: per_protagonist,
            warnings: parsed.warnings.clone(),
            trace,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{default_corpus, generate_scene};

    #[test]
    fn caption_substitution() {
        let caption = "a red square moving right on a solid background";
        let reps = vec![("red square".to_string(), "blue circle".to_string())];
        assert_eq!(
            edited_text(caption, &reps, None),
            "a blue circle moving right on a solid background"
        );
        assert_eq!(
            edited_text(caption, &[], Some("on a striped background")),
            "a red square moving right on a striped background"
        );
        assert_eq!(
            edited_text(caption, &reps, Some("a striped background")),
            "a blue circle moving right on a striped background"
        );
        assert_eq!(
            edited_text(caption, &reps, Some("a yellow star on a gradient background")),
            "a blue circle moving right on a gradient background"
        );
    }

    #[test]
    fn parse_matches_ground_truth() {
        let experts = ExpertRegistry::oracle(32);
        for desc in default_corpus() {
            let scene = generate_scene(&desc).unwrap();
            let parsed = parse_source(&scene.video, Some(&desc), &experts).unwrap();
            assert_eq!(parsed.masks.len(), scene.masks.len());
            for (a, b) in parsed.masks.iter().zip(&scene.masks) {
                assert!(a.iou(b) >= 0.9, "iou {}", a.iou(b));
            }
            assert_eq!(parsed.per_frame_embeddings.len(), 8);
            let again = parse_source(&scene.video, Some(&desc), &experts).unwrap();
            assert_eq!(again.masks, parsed.masks);
        }
    }

    #[test]
    fn two_protagonists_get_disjoint_masks() {
        let experts = ExpertRegistry::oracle(32);
        let desc = &default_corpus()[4];
        let scene = generate_scene(desc).unwrap();
        let parsed = parse_source(&scene.video, Some(desc), &experts).unwrap();
        assert_eq!(parsed.masks.len(), 2);
        assert!(MaskVolume::union(&parsed.masks).is_ok());
    }

    #[test]
    fn clue_shapes_follow_the_mode() {
        let experts = ExpertRegistry::oracle(32);
        let desc = SceneDescriptor::default_scene();
        let scene = generate_scene(&desc).unwrap();
        let parsed = parse_source(&scene.video, Some(&desc), &experts).unwrap();
        let (image, _) = crate::synthdata::canonical_render_words("circle", "blue", 32).unwrap();
        let req = EditRequest::new(EditMode::Protagonist).with_references(vec![image.clone()]);
        let clues = prepare_clues(&req, &parsed, &experts).unwrap();
        assert_eq!(clues.background_embedding.len(), 8);
        assert!(clues.protagonist_embeddings[0].is_broadcast());
        assert_eq!(clues.reference_phrases[0].as_deref(), Some("blue circle"));

        let req = EditRequest::new(EditMode::Background).with_prompt("on a striped background");
        let clues = prepare_clues(&req, &parsed, &experts).unwrap();
        assert_eq!(clues.protagonist_embeddings[0].len(), 8);
        assert!(clues.background_embedding.is_broadcast());

        let req = EditRequest::new(EditMode::Text2Video)
            .with_references(vec![image])
            .with_prompt("on a striped background");
        let clues = prepare_clues(&req, &parsed, &experts).unwrap();
        let prior = experts.prior_converter.prior_convert("on a striped background").unwrap();
        assert_eq!(clues.background_embedding.row(0), prior.data());

        assert!(prepare_clues(&EditRequest::new(EditMode::Protagonist), &parsed, &experts).is_err());
        assert!(prepare_clues(&EditRequest::new(EditMode::Background), &parsed, &experts).is_err());
    }

    #[test]
    fn projection_is_seeded_and_visual() {
        let t = crate::experts::embed_text("a blue circle").embedding;
        let a = text_projection(&t, 1).unwrap();
        assert_eq!(a, text_projection(&t, 1).unwrap());
        assert_ne!(a, text_projection(&t, 2).unwrap());
        assert_eq!(a.space(), EmbeddingSpace::Visual);
    }
}
