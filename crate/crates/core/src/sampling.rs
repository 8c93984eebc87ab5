//! DDIM inversion, classifier-free guidance and the two-branch mask-guided
//! sampler with feature-level and latent-level fusion.

use ndarray::{Array3, Array4, Zip};
use serde::{Deserialize, Serialize};

use crate::denoiser::{ConditioningBundle, ConditioningField, Denoiser};
use crate::error::{Error, Result};
use crate::experts::ControlVolume;
use crate::schedules::{ddim_inverse_step, ddim_step, make_ladder, NoiseSchedule};
use crate::video::{Embedding, FrameEmbeddings, MaskVolume, VideoTensor, EMBED_DIM};

/// Tuned for a denoiser fine-tuned from scratch on one clip; 7.5 (the usual
/// setting for large pretrained models) saturates edits here.
pub const DEFAULT_GUIDANCE: f64 = 1.5;

/// Anything that predicts v for a noisy clip.
pub trait VModel: Sync {
    fn predict_v(&self, z_t: &VideoTensor, t: usize, cond: &ConditioningBundle) -> Result<VideoTensor>;
    /// Side lengths of the conditioning-field levels the model consumes.
    fn field_resolutions(&self) -> Vec<usize>;
}

impl VModel for Denoiser {
    fn predict_v(&self, z_t: &VideoTensor, t: usize, cond: &ConditioningBundle) -> Result<VideoTensor> {
        self.denoise(z_t, t, cond)
    }

    fn field_resolutions(&self) -> Vec<usize> {
        self.config().level_resolutions()
    }
}

/// τ default: the final fifth of training-scale timesteps is reference-only.
pub fn default_tau(train_steps: usize) -> usize {
    (0.2 * train_steps as f64).round() as usize
}

/// `v_u + w·(v_c − v_u)`, returning the exact branch for w ∈ {0, 1}.
pub fn combine_guidance(v_uncond: &VideoTensor, v_cond: &VideoTensor, w: f64) -> Result<VideoTensor> {
    if w == 1.0 {
        return Ok(v_cond.clone());
    }
    if w == 0.0 {
        return Ok(v_uncond.clone());
    }
    v_uncond.zip_with(v_cond, "guidance", |u, c| u + w * (c - u))
}

/// Classifier-free guided prediction; the unconditional branch drops text and
/// image conditioning but keeps the control signal.
pub fn guided_v(model: &dyn VModel, z_t: &VideoTensor, t: usize, cond: &ConditioningBundle, w: f64) -> Result<VideoTensor> {
    if !(w >= 0.0 && w.is_finite()) {
        return Err(Error::Invalid(format!("guidance scale {w} must be finite and ≥ 0")));
    }
    if w == 1.0 {
        return model.predict_v(z_t, t, cond);
    }
    let v_u = model.predict_v(z_t, t, &cond.unconditional())?;
    if w == 0.0 {
        return Ok(v_u);
    }
    let v_c = model.predict_v(z_t, t, cond)?;
    combine_guidance(&v_u, &v_c, w)
}

/// Inverts `video` to the terminal latent along the ascending ladder, unguided.
pub fn ddim_invert(
    video: &VideoTensor,
    cond: &ConditioningBundle,
    model: &dyn VModel,
    sched: &NoiseSchedule,
    n_steps: usize,
) -> Result<VideoTensor> {
    if n_steps == 0 {
        return Ok(video.clone());
    }
    let ladder = make_ladder(sched, n_steps)?;
    let limit = 1e3 * video.l2_norm().max(1e-12);
    let mut z = video.clone();
    for (t, t_next) in ladder.inversion_pairs() {
        let v = model.predict_v(&z, t, cond)?;
        z = ddim_inverse_step(&z, &v, t, t_next, sched)?;
        let norm = z.l2_norm();
        if !norm.is_finite() || norm > limit {
            return Err(Error::Numerical(format!(
                "DDIM inversion blew up at t={t_next}: |z| = {norm:.3e} exceeds {limit:.3e}"
            )));
        }
    }
    Ok(z)
}

/// Plain guided DDIM sampling from `z_t_max` with a single conditioning bundle.
pub fn ddim_sample(
    z_t_max: &VideoTensor,
    cond: &ConditioningBundle,
    model: &dyn VModel,
    sched: &NoiseSchedule,
    n_steps: usize,
    w: f64,
) -> Result<VideoTensor> {
    if n_steps == 0 {
        return Ok(z_t_max.clone());
    }
    let ladder = make_ladder(sched, n_steps)?;
    let mut z = z_t_max.clone();
    for (t, t_prev) in ladder.sampling_pairs() {
        let v = guided_v(model, &z, t, cond, w)?;
        z = ddim_step(&z, &v, t, t_prev, sched)?;
    }
    Ok(z)
}

/// How masks are brought down to coarser field levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskDownsample {
    #[default]
    Area,
    Nearest,
}

/// Mask planes `[F, r, r]` at a coarser resolution.
pub fn downsample_mask(mask: &MaskVolume, r: usize, mode: MaskDownsample) -> Result<Array3<f64>> {
    let (f, h, w) = (mask.frames(), mask.height(), mask.width());
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!("cannot downsample {h}x{w} mask to {r}x{r}")));
    }
    let (fy, fx) = (h / r, w / r);
    let d = mask.data();
    Ok(Array3::from_shape_fn((f, r, r), |(fi, y, x)| match mode {
        MaskDownsample::Area => {
            let mut s = 0.0;
            for dy in 0..fy {
                for dx in 0..fx {
                    s += d[[fi, y * fy + dy, x * fx + dx]];
                }
            }
            s / (fy * fx) as f64
        }
        MaskDownsample::Nearest => d[[fi, y * fy + fy / 2, x * fx + fx / 2]],
    }))
}

fn check_masks(masks: &[MaskVolume]) -> Result<()> {
    let Some(first) = masks.first() else {
        return Err(Error::Invalid("fusion needs at least one mask".into()));
    };
    for m in masks {
        if (m.frames(), m.height(), m.width()) != (first.frames(), first.height(), first.width()) {
            return Err(Error::Shape("protagonist masks differ in shape".into()));
        }
    }
    if masks.len() > 1 {
        MaskVolume::union(masks)?;
    }
    Ok(())
}

/// Per-pixel conditioning field for one sampling step.
///
/// Below `tau_f` the field is the reference-only mix `Σ_k M̃_k·I_R_k` with
/// `M̃_k = M_k / Σ_j M_j` (uniform where no mask covers the pixel); from
/// `tau_f` on it is `Σ_k M_k·I_R_k + (1 − Σ_k M_k)·I_P`.
pub fn build_fusion_field(
    i_r: &[FrameEmbeddings],
    i_p: &FrameEmbeddings,
    masks: &[MaskVolume],
    t: usize,
    tau_f: usize,
    resolutions: &[usize],
    downsample: MaskDownsample,
) -> Result<ConditioningField> {
    check_masks(masks)?;
    if i_r.len() != masks.len() {
        return Err(Error::Invalid(format!(
            "{} protagonist embeddings for {} masks",
            i_r.len(),
            masks.len()
        )));
    }
    let frames = masks[0].frames();
    for e in i_r {
        e.ensure_frames(frames)?;
    }
    i_p.ensure_frames(frames)?;
    let k_count = masks.len();
    let fuse = t >= tau_f;
    let mut levels = Vec::with_capacity(resolutions.len());
    for &r in resolutions {
        let planes = masks
            .iter()
            .map(|m| downsample_mask(m, r, downsample))
            .collect::<Result<Vec<_>>>()?;
        let mut field = Array4::zeros((frames, EMBED_DIM, r, r));
        let mut weights = vec![0.0; k_count];
        for f in 0..frames {
            let rows: Vec<_> = i_r.iter().map(|e| e.row(f)).collect();
            let bg = i_p.row(f);
            for y in 0..r {
                for x in 0..r {
                    let total: f64 = planes.iter().map(|p| p[[f, y, x]]).sum();
                    for (wk, p) in weights.iter_mut().zip(&planes) {
                        *wk = if fuse {
                            p[[f, y, x]]
                        } else if total > 0.0 {
                            p[[f, y, x]] / total
                        } else {
                            1.0 / k_count as f64
                        };
                    }
                    for c in 0..EMBED_DIM {
                        let mut v = if k_count == 1 && !fuse {
                            rows[0][c]
                        } else {
                            weights.iter().zip(&rows).map(|(wk, row)| wk * row[c]).sum::<f64>()
                        };
                        if fuse {
                            v += (1.0 - total) * bg[c];
                        }
                        field[[f, c, y, x]] = v;
                    }
                }
            }
        }
        levels.push(field);
    }
    ConditioningField::new(levels)
}

/// Latent fusion `(M·d_ref + d_fused) / (1 + M)` with `M = Σ_k M_k`.
pub fn fuse_latents(d_ref: &VideoTensor, d_fused: &VideoTensor, masks: &[MaskVolume]) -> Result<VideoTensor> {
    d_ref.ensure_same_shape(d_fused, "fuse_latents")?;
    check_masks(masks)?;
    for m in masks {
        m.ensure_matches(d_ref)?;
    }
    let mut total = masks[0].data().clone();
    for m in &masks[1..] {
        total += m.data();
    }
    let mut out = d_fused.data().clone();
    Zip::indexed(&mut out).and(d_ref.data()).for_each(|(f, _, y, x), o, &a| {
        let m = total[[f, y, x]];
        *o = (m * a + *o) / (1.0 + m);
    });
    VideoTensor::new(out)
}

/// Everything the mask-guided sampler needs besides the model and latent.
#[derive(Debug, Clone)]
pub struct FusionConfig {
    pub tau_f: usize,
    pub tau_l: usize,
    pub guidance: f64,
    pub n_steps: usize,
    pub masks: Vec<MaskVolume>,
    pub protagonist_embeddings: Vec<FrameEmbeddings>,
    pub background_embedding: FrameEmbeddings,
    pub mask_downsample: MaskDownsample,
    /// When false every step keeps only the fused branch (latent fusion ablated).
    pub latent_fusion: bool,
}

impl FusionConfig {
    pub fn new(
        masks: Vec<MaskVolume>,
        protagonist_embeddings: Vec<FrameEmbeddings>,
        background_embedding: FrameEmbeddings,
        train_steps: usize,
    ) -> Self {
        let tau = default_tau(train_steps);
        Self {
            tau_f: tau,
            tau_l: tau,
            guidance: DEFAULT_GUIDANCE,
            n_steps: crate::schedules::DEFAULT_SAMPLING_STEPS,
            masks,
            protagonist_embeddings,
            background_embedding,
            mask_downsample: MaskDownsample::Area,
            latent_fusion: true,
        }
    }

    pub fn validate(&self, train_steps: usize) -> Result<()> {
        if self.tau_f > train_steps + 1 || self.tau_l > train_steps + 1 {
            return Err(Error::Invalid(format!(
                "tau_f {} and tau_l {} must lie in [0, {}]",
                self.tau_f,
                self.tau_l,
                train_steps + 1
            )));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::Invalid(format!("guidance {} must be finite and ≥ 0", self.guidance)));
        }
        if self.masks.is_empty() || self.masks.len() != self.protagonist_embeddings.len() {
            return Err(Error::Invalid(format!(
                "{} masks for {} protagonist embeddings",
                self.masks.len(),
                self.protagonist_embeddings.len()
            )));
        }
        check_masks(&self.masks)
    }
}

/// One rung of the sampler, as written by trace mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: usize,
    pub t_prev: usize,
    pub feature_fusion: bool,
    pub latent_fusion: bool,
    pub forward_passes: usize,
    pub latent_norm: f64,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub video: VideoTensor,
    pub trace: Vec<TraceStep>,
}

/// Counts forward passes of the wrapped model.
struct Counting<'a> {
    inner: &'a dyn VModel,
    calls: std::sync::atomic::AtomicUsize,
}

impl VModel for Counting<'_> {
    fn predict_v(&self, z_t: &VideoTensor, t: usize, cond: &ConditioningBundle) -> Result<VideoTensor> {
        self.calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.inner.predict_v(z_t, t, cond)
    }

    fn field_resolutions(&self) -> Vec<usize> {
        self.inner.field_resolutions()
    }
}

/// Two-branch sampler: branch A is conditioned on the reference-only field,
/// branch B on the fused field; below `tau_l` only A is kept, otherwise the
/// branches are blended with [`fuse_latents`]. One latent trajectory, one
/// shared unconditional prediction per step.
pub fn mask_guided_sample(
    z_t_max: &VideoTensor,
    model: &dyn VModel,
    sched: &NoiseSchedule,
    text: Option<&Embedding>,
    control: Option<&ControlVolume>,
    fusion: &FusionConfig,
) -> Result<SampleOutput> {
    let train_steps = sched.train_steps();
    fusion.validate(train_steps)?;
    for m in &fusion.masks {
        m.ensure_matches(z_t_max)?;
    }
    if fusion.n_steps == 0 {
        return Ok(SampleOutput {
            video: z_t_max.clone(),
            trace: Vec::new(),
        });
    }
    let ladder = make_ladder(sched, fusion.n_steps)?;
    let counting = Counting {
        inner: model,
        calls: Default::default(),
    };
    let resolutions = model.field_resolutions();
    let reference_field = build_fusion_field(
        &fusion.protagonist_embeddings,
        &fusion.background_embedding,
        &fusion.masks,
        0,
        1,
        &resolutions,
        fusion.mask_downsample,
    )?;
    let fused_field = build_fusion_field(
        &fusion.protagonist_embeddings,
        &fusion.background_embedding,
        &fusion.masks,
        1,
        0,
        &resolutions,
        fusion.mask_downsample,
    )?;
    let bundle = |field: &ConditioningField| ConditioningBundle {
        text: text.cloned(),
        image_field: field.clone(),
        control: control.cloned(),
    };
    let cond_a = bundle(&reference_field);
    let cond_b_fused = bundle(&fused_field);
    let fused_same_as_reference = fused_field.identical(&reference_field);
    let w = fusion.guidance;
    let mut z = z_t_max.clone();
    let mut trace = Vec::with_capacity(ladder.len());
    for (t, t_prev) in ladder.sampling_pairs() {
        let before = counting.calls.load(std::sync::atomic::Ordering::Relaxed);
        let feature_fusion = t >= fusion.tau_f;
        let latent_fusion = t >= fusion.tau_l;
        let need_a = fusion.latent_fusion;
        let cond_b = if feature_fusion { &cond_b_fused } else { &cond_a };
        let b_is_a = !feature_fusion || fused_same_as_reference;
        let v_uncond = if w == 1.0 {
            None
        } else {
            Some(counting.predict_v(&z, t, &cond_a.unconditional())?)
        };
        let guide = |v_c: Option<VideoTensor>| -> Result<VideoTensor> {
            match (&v_uncond, v_c) {
                (None, Some(c)) => Ok(c),
                (Some(u), None) => Ok(u.clone()),
                (Some(u), Some(c)) => combine_guidance(u, &c, w),
                (None, None) => unreachable!("w = 1 always evaluates the conditional branch"),
            }
        };
        let cond_pred = |cond: &ConditioningBundle| -> Result<Option<VideoTensor>> {
            if w == 0.0 {
                Ok(None)
            } else {
                counting.predict_v(&z, t, cond).map(Some)
            }
        };
        let need_b = !fusion.latent_fusion || latent_fusion;
        let step_a = if need_a || (need_b && b_is_a) {
            let v = guide(cond_pred(&cond_a)?)?;
            Some(ddim_step(&z, &v, t, t_prev, sched)?)
        } else {
            None
        };
        let step_b = match (need_b, b_is_a) {
            (false, _) => None,
            (true, true) => step_a.clone(),
            (true, false) => {
                let v = guide(cond_pred(cond_b)?)?;
                Some(ddim_step(&z, &v, t, t_prev, sched)?)
            }
        };
        z = match (step_a, step_b) {
            (Some(a), Some(b)) if fusion.latent_fusion && !b_is_a => fuse_latents(&a, &b, &fusion.masks)?,
            (_, Some(b)) => b,
            (Some(a), None) => a,
            (None, None) => unreachable!("at least one branch is evaluated"),
        };
        let latent_norm = z.l2_norm();
        if !latent_norm.is_finite() {
            return Err(Error::Numerical(format!("sampler latent became non-finite at t={t_prev}")));
        }
        trace.push(TraceStep {
            t,
            t_prev,
            feature_fusion,
            latent_fusion: fusion.latent_fusion && latent_fusion,
            forward_passes: counting.calls.load(std::sync::atomic::Ordering::Relaxed) - before,
            latent_norm,
        });
    }
    Ok(SampleOutput { video: z, trace })
}
