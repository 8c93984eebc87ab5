//! Single-video fine-tuning with the v-prediction objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{spatialize_embedding, ConditioningBundle, ConditioningField, Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::experts::{ControlVolume, ExpertRegistry};
use crate::nn::Adam;
use crate::rng::{normal_video, seeded_rng};
use crate::sampling::{build_fusion_field, MaskDownsample, VModel};
use crate::schedules::{add_noise, v_target, NoiseSchedule};
use crate::synthdata::ColorName;
use crate::video::{Embedding, FrameEmbeddings, MaskVolume, VideoTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub cond_dropout_p: f64,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Recolor protagonists and background independently with the 12 hue permutations/negations, remapping caption colors.
    pub color_augmentation: bool,
    /// With augmentation, probability that an example keeps the source background colors.
    pub source_background_p: f64,
    /// Probability of conditioning on a mask-composed field instead of a whole-frame embedding.
    /// Only used when masks are supplied.
    pub fused_field_p: f64,
    /// Probability of the reference-only field (protagonist embedding everywhere).
    pub reference_field_p: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 3e-4,
            cond_dropout_p: 0.1,
            seed: 0,
            grad_clip: Some(1.0),
            color_augmentation: true,
            source_background_p: 0.5,
            fused_field_p: 0.55,
            reference_field_p: 0.15,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.cond_dropout_p) {
            return Err(Error::Invalid(format!("cond_dropout_p {} outside [0, 1)", self.cond_dropout_p)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.source_background_p) {
            return Err(Error::Invalid(format!(
                "source_background_p {} outside [0, 1]",
                self.source_background_p
            )));
        }
        let p = self.fused_field_p + self.reference_field_p;
        if self.fused_field_p < 0.0 || self.reference_field_p < 0.0 || p > 1.0 {
            return Err(Error::Invalid("field probabilities must be non-negative and sum to at most 1".into()));
        }
        Ok(())
    }
}

/// Channel permutation with optional negation; maps vocabulary hues onto vocabulary hues.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColorTransform {
    pub perm: [usize; 3],
    pub negate: bool,
}

impl ColorTransform {
    pub const IDENTITY: ColorTransform = ColorTransform {
        perm: [0, 1, 2],
        negate: false,
    };

    pub fn all() -> Vec<ColorTransform> {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        [false, true]
            .into_iter()
            .flat_map(|negate| perms.into_iter().map(move |perm| ColorTransform { perm, negate }))
            .collect()
    }

    pub fn apply_rgb(&self, rgb: [f64; 3]) -> [f64; 3] {
        let s = if self.negate { -1.0 } else { 1.0 };
        [s * rgb[self.perm[0]], s * rgb[self.perm[1]], s * rgb[self.perm[2]]]
    }

    pub fn apply_color(&self, c: ColorName) -> ColorName {
        ColorName::from_rgb(self.apply_rgb(c.rgb())).expect("vocabulary is closed under the transform")
    }

    /// Recolors the pixels selected by `region` (blending soft edges), or the
    /// whole clip when `region` is `None`.
    pub fn apply_video(&self, video: &VideoTensor, region: Option<&MaskVolume>) -> VideoTensor {
        if *self == Self::IDENTITY {
            return video.clone();
        }
        let d = video.data();
        let s = if self.negate { -1.0 } else { 1.0 };
        let out = ndarray::Array4::from_shape_fn(d.dim(), |(f, c, y, x)| {
            let moved = s * d[[f, self.perm[c], y, x]];
            match region {
                Some(m) => {
                    let w = m.data()[[f, y, x]];
                    w * moved + (1.0 - w) * d[[f, c, y, x]]
                }
                None => moved,
            }
        });
        VideoTensor::new(out).expect("same shape").with_frame_rate(video.frame_rate())
    }

    /// Replaces every color word of a caption with its transformed hue.
    pub fn apply_caption(&self, caption: &str) -> String {
        caption
            .split(' ')
            .map(|w| match w.parse::<ColorName>() {
                Ok(c) => self.apply_color(c).word().to_string(),
                Err(_) => w.to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Embeddings of one color variant of the training clip.
struct Variant {
    video: VideoTensor,
    text: Embedding,
    frames: Vec<Embedding>,
    /// `[protagonist][frame]`; `None` where the mask is empty.
    protagonists: Vec<Vec<Option<Embedding>>>,
    /// Embedding of everything outside the masks, per frame.
    complement: Vec<Option<Embedding>>,
}

/// The clip, its caption and everything precomputed for training.
pub struct TrainingSet {
    /// Indexed `protagonist_transform * background_variants + background_transform`,
    /// with the identity first in both.
    variants: Vec<Variant>,
    background_variants: usize,
    masks: Vec<MaskVolume>,
    complement_mask: Option<MaskVolume>,
    control: Option<ControlVolume>,
    resolutions: Vec<usize>,
}

impl TrainingSet {
    pub fn new(
        video: &VideoTensor,
        caption: &str,
        masks: &[MaskVolume],
        control: Option<ControlVolume>,
        experts: &ExpertRegistry,
        model_config: &DenoiserConfig,
        color_augmentation: bool,
    ) -> Result<Self> {
        for m in masks {
            m.ensure_matches(video)?;
        }
        if let Some(c) = &control {
            c.ensure_matches(video)?;
        }
        let complement_mask = if masks.is_empty() {
            None
        } else {
            let union = MaskVolume::union(masks)?;
            Some(MaskVolume::new(union.data().mapv(|v| 1.0 - v))?)
        };
        // Protagonists and background are recolored independently, so the
        // caption's protagonist hue says nothing about the background hue.
        let transforms: Vec<(ColorTransform, ColorTransform)> = if color_augmentation {
            let all = ColorTransform::all();
            all.iter().flat_map(|&p| all.iter().map(move |&b| (p, b))).collect()
        } else {
            vec![(ColorTransform::IDENTITY, ColorTransform::IDENTITY)]
        };
        let (region, outside) = match &complement_mask {
            Some(cm) => (MaskVolume::new(cm.data().mapv(|v| 1.0 - v))?, cm.clone()),
            None => (
                MaskVolume::constant(video.frames(), video.height(), video.width(), 0.0)?,
                MaskVolume::constant(video.frames(), video.height(), video.width(), 1.0)?,
            ),
        };
        let embed = experts.vision_embedder.as_ref();
        let masked = |v: &VideoTensor, m: &MaskVolume, f: usize| -> Result<Option<Embedding>> {
            if m.area(f) > 0.0 {
                embed.embed_image(v.frame(f), Some(m.frame(f))).map(Some)
            } else {
                Ok(None)
            }
        };
        let mut variants = Vec::with_capacity(transforms.len());
        for (tp, tb) in transforms {
            let v = tp.apply_video(&tb.apply_video(video, Some(&outside)), Some(&region));
            let text = experts.text_embedder.embed_text(&tp.apply_caption(caption)).embedding;
            let frames = (0..v.frames())
                .map(|f| embed.embed_image(v.frame(f), None))
                .collect::<Result<Vec<_>>>()?;
            let protagonists = masks
                .iter()
                .map(|m| (0..v.frames()).map(|f| masked(&v, m, f)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?;
            let complement = match &complement_mask {
                Some(cm) => (0..v.frames()).map(|f| masked(&v, cm, f)).collect::<Result<Vec<_>>>()?,
                None => Vec::new(),
            };
            variants.push(Variant {
                video: v,
                text,
                frames,
                protagonists,
                complement,
            });
        }
        Ok(Self {
            background_variants: if color_augmentation { ColorTransform::all().len() } else { 1 },
            variants,
            masks: masks.to_vec(),
            complement_mask,
            control,
            resolutions: model_config.level_resolutions(),
        })
    }

    pub fn frames(&self) -> usize {
        self.variants[0].video.frames()
    }

    pub fn num_variants(&self) -> usize {
        self.variants.len()
    }
}

/// Which conditioning field a training example used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    WholeFrame,
    Reference,
    Fused,
    Dropped,
}

/// One drawn training example.
pub struct Example {
    pub z_t: VideoTensor,
    pub t: usize,
    pub target: VideoTensor,
    pub cond: ConditioningBundle,
    pub field: FieldKind,
    pub reference_frame: usize,
}

impl Example {
    pub fn dropped(&self) -> bool {
        self.field == FieldKind::Dropped
    }
}

fn frame_rows(rows: &[Embedding]) -> Result<FrameEmbeddings> {
    FrameEmbeddings::per_frame(rows)
}

/// Draws t, ε, a reference frame, dropout and a conditioning field.
pub fn sample_example<R: Rng>(data: &TrainingSet, sched: &NoiseSchedule, rng: &mut R, cfg: &TrainConfig) -> Result<Example> {
    let frames = data.frames();
    let drop = rng.random::<f64>() < cfg.cond_dropout_p;
    // The unconditional model only ever sees the clip itself, so guidance
    // pushes away from the source rather than from an average recoloring.
    let nb = data.background_variants;
    let protagonist = rng.random_range(0..data.variants.len() / nb);
    let background = if rng.random::<f64>() < cfg.source_background_p {
        0
    } else {
        rng.random_range(0..nb)
    };
    let pick = protagonist * nb + background;
    let variant = &data.variants[if drop { 0 } else { pick }];
    let t = rng.random_range(1..=sched.train_steps());
    let eps = normal_video(rng, variant.video.shape());
    let r = rng.random_range(0..frames);
    let u = rng.random::<f64>();
    let z_t = add_noise(&variant.video, &eps, t, sched)?;
    let target = v_target(&variant.video, &eps, t, sched)?;
    let whole = |f: usize| FrameEmbeddings::single(&variant.frames[f]);
    let (field, kind) = if drop {
        (ConditioningField::zeros(frames, &data.resolutions), FieldKind::Dropped)
    } else if data.masks.is_empty() || u >= cfg.fused_field_p + cfg.reference_field_p {
        (spatialize_embedding(&whole(r), frames, &data.resolutions)?, FieldKind::WholeFrame)
    } else {
        let refs = variant
            .protagonists
            .iter()
            .map(|per_frame| {
                let e = per_frame[r]
                    .as_ref()
                    .or_else(|| per_frame.iter().flatten().next())
                    .unwrap_or(&variant.frames[r]);
                FrameEmbeddings::single(e)
            })
            .collect::<Vec<_>>();
        if u < cfg.reference_field_p {
            let bg = whole(r);
            let field = build_fusion_field(&refs, &bg, &data.masks, 0, 1, &data.resolutions, MaskDownsample::Area)?;
            (field, FieldKind::Reference)
        } else {
            let per_frame_whole = frame_rows(&variant.frames)?;
            let refs = if rng.random::<f64>() < 0.3 {
                vec![per_frame_whole.clone(); data.masks.len()]
            } else {
                refs
            };
            let background = if rng.random::<f64>() < 0.5 && data.complement_mask.is_some() {
                let rows: Vec<Embedding> = variant
                    .complement
                    .iter()
                    .zip(&variant.frames)
                    .map(|(c, w)| c.clone().unwrap_or_else(|| w.clone()))
                    .collect();
                frame_rows(&rows)?
            } else {
                per_frame_whole
            };
            let field = build_fusion_field(&refs, &background, &data.masks, 1, 0, &data.resolutions, MaskDownsample::Area)?;
            (field, FieldKind::Fused)
        }
    };
    let cond = ConditioningBundle {
        text: (!drop).then(|| variant.text.clone()),
        image_field: field,
        control: data.control.clone(),
    };
    Ok(Example {
        z_t,
        t,
        target,
        cond,
        field: kind,
        reference_frame: r,
    })
}

/// Mean squared error between a model's v prediction and the v target on one drawn example.
pub fn loss_step<R: Rng>(
    model: &dyn VModel,
    data: &TrainingSet,
    sched: &NoiseSchedule,
    rng: &mut R,
    cfg: &TrainConfig,
) -> Result<f64> {
    let ex = sample_example(data, sched, rng, cfg)?;
    let pred = model.predict_v(&ex.z_t, ex.t, &ex.cond)?;
    pred.rms_diff(&ex.target).map(|r| r * r)
}

/// Result of [`train_on_video`].
pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub dropped_steps: usize,
}

/// Loss more than this multiple of the first loss ...
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// ... for this many consecutive steps aborts training.
pub const DIVERGENCE_PATIENCE: usize = 100;

/// Adam on the v-prediction loss for `cfg.steps` steps; returns the per-step losses.
pub fn train_on_video(model: &mut Denoiser, data: &TrainingSet, sched: &NoiseSchedule, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if model.config().train_steps != sched.train_steps() {
        return Err(Error::Invalid(format!(
            "model expects {} training timesteps, schedule has {}",
            model.config().train_steps,
            sched.train_steps()
        )));
    }
    let mut rng = seeded_rng(cfg.seed);
    let mut opt = Adam::new(model.params(), cfg.learning_rate);
    if let Some(c) = cfg.grad_clip {
        opt = opt.with_clip_norm(c);
    }
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut dropped_steps = 0;
    let mut above = 0;
    for step in 0..cfg.steps {
        let ex = sample_example(data, sched, &mut rng, cfg)?;
        dropped_steps += usize::from(ex.dropped());
        let (value, grads) = model.loss_and_gradients(model.params(), &ex.z_t, ex.t, &ex.cond, &ex.target)?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("training loss became non-finite at step {step}")));
        }
        losses.push(value);
        opt.step(model.params_mut(), &grads);
        let loss = *losses.last().expect("pushed above");
        if loss > DIVERGENCE_FACTOR * losses[0] {
            above += 1;
            if above >= DIVERGENCE_PATIENCE {
                return Err(Error::Numerical(format!(
                    "training diverged: loss {loss:.4} exceeded {DIVERGENCE_FACTOR}× the initial {:.4} for {DIVERGENCE_PATIENCE} consecutive steps (step {step})",
                    losses[0]
                )));
            }
        } else {
            above = 0;
        }
        if (step + 1) % 100 == 0 {
            let recent = &losses[losses.len().saturating_sub(100)..];
            log::info!(
                "step {}: mean loss over last {} steps {:.5}",
                step + 1,
                recent.len(),
                recent.iter().sum::<f64>() / recent.len() as f64
            );
        }
    }
    Ok(TrainOutcome { losses, dropped_steps })
}
