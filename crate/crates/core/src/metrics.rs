//! Prompt fidelity, subject fidelity and background preservation scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ExpertRegistry;
use crate::video::{Embedding, MaskVolume, VideoTensor};

/// Mean cosine between the prompt (mapped into image space by the prior) and each frame.
pub fn prompt_fidelity(video: &VideoTensor, prompt: &str, experts: &ExpertRegistry) -> Result<f64> {
    let target = experts.prior_converter.prior_convert(prompt)?;
    let mut total = 0.0;
    for f in 0..video.frames() {
        total += experts.vision_embedder.embed_image(video.frame(f), None)?.cosine(&target);
    }
    Ok(total / video.frames() as f64)
}

/// Mean cosine between `reference` and each frame restricted to its mask.
/// Frames with an empty mask are skipped.
pub fn subject_fidelity(
    video: &VideoTensor,
    reference: &Embedding,
    mask: &MaskVolume,
    experts: &ExpertRegistry,
) -> Result<f64> {
    mask.ensure_matches(video)?;
    let mut total = 0.0;
    let mut counted = 0usize;
    for f in 0..video.frames() {
        if mask.area(f) == 0.0 {
            continue;
        }
        total += experts
            .vision_embedder
            .embed_image(video.frame(f), Some(mask.frame(f)))?
            .cosine(reference);
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Invalid("subject fidelity: every frame's mask is empty".into()));
    }
    Ok(total / counted as f64)
}

/// Mean cosine between `reference` and each whole frame.
pub fn subject_fidelity_whole_frame(video: &VideoTensor, reference: &Embedding, experts: &ExpertRegistry) -> Result<f64> {
    let mut total = 0.0;
    for f in 0..video.frames() {
        total += experts.vision_embedder.embed_image(video.frame(f), None)?.cosine(reference);
    }
    Ok(total / video.frames() as f64)
}

/// RMS pixel difference outside the union of `masks`, per frame, averaged over
/// frames whose complement is non-empty.
pub fn background_preservation(edited: &VideoTensor, source: &VideoTensor, masks: &[MaskVolume]) -> Result<f64> {
    edited.ensure_same_shape(source, "background preservation")?;
    let keep = if masks.is_empty() {
        MaskVolume::constant(source.frames(), source.height(), source.width(), 0.0)?
    } else {
        MaskVolume::union(masks)?
    };
    keep.ensure_matches(source)?;
    let (e, s) = (edited.data(), source.data());
    let mut total = 0.0;
    let mut counted = 0usize;
    for f in 0..source.frames() {
        let mut sq = 0.0;
        let mut weight = 0.0;
        for ((y, x), &m) in keep.frame(f).indexed_iter() {
            let w = 1.0 - m;
            if w <= 0.0 {
                continue;
            }
            for c in 0..source.channels() {
                let d = e[[f, c, y, x]] - s[[f, c, y, x]];
                sq += w * d * d;
            }
            weight += w * source.channels() as f64;
        }
        if weight > 0.0 {
            total += (sq / weight).sqrt();
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Invalid("background preservation: the masks cover every pixel".into()));
    }
    Ok(total / counted as f64)
}

/// The three scores reported for an edit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub prompt_fidelity: f64,
    pub subject_fidelity: f64,
    pub background_preservation: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{canonical_render, generate_scene, ColorName, SceneDescriptor, Shape};
    use ndarray::Array4;

    fn experts() -> ExpertRegistry {
        ExpertRegistry::oracle(32)
    }

    #[test]
    fn identical_videos_preserve_background_exactly() {
        let scene = generate_scene(&SceneDescriptor::default_scene()).unwrap();
        let bp = background_preservation(&scene.video, &scene.video, &scene.masks).unwrap();
        assert_eq!(bp, 0.0);
    }

    #[test]
    fn changes_inside_masks_do_not_count() {
        let scene = generate_scene(&SceneDescriptor::default_scene()).unwrap();
        let m = scene.masks[0].data();
        let mut data = scene.video.data().clone();
        for ((f, _, y, x), v) in data.indexed_iter_mut() {
            if m[[f, y, x]] > 0.0 {
                *v += 0.1;
            }
        }
        let edited = VideoTensor::new(data).unwrap();
        assert_eq!(background_preservation(&edited, &scene.video, &scene.masks).unwrap(), 0.0);
    }

    #[test]
    fn uniform_offset_gives_its_magnitude() {
        let source = VideoTensor::new(Array4::zeros((2, 3, 4, 4))).unwrap();
        let edited = source.map(|v| v - 0.25);
        let mut m = ndarray::Array3::zeros((2, 4, 4));
        m.slice_mut(ndarray::s![.., .., 0..2]).fill(1.0);
        let masks = vec![MaskVolume::new(m).unwrap()];
        let bp = background_preservation(&edited, &source, &masks).unwrap();
        assert!((bp - 0.25).abs() < 1e-12);
    }

    #[test]
    fn full_cover_is_an_error() {
        let v = VideoTensor::zeros(1, 3, 4, 4);
        let masks = vec![MaskVolume::constant(1, 4, 4, 1.0).unwrap()];
        assert!(background_preservation(&v, &v, &masks).is_err());
    }

    #[test]
    fn canonical_subject_scores_high() {
        let ex = experts();
        let (image, mask) = canonical_render(Shape::Circle, ColorName::Blue, 32);
        let reference = ex.vision_embedder.embed_image(image.view(), Some(mask.view())).unwrap();
        let data = ndarray::stack(ndarray::Axis(0), &[image.view(), image.view()]).unwrap();
        let video = VideoTensor::new(data).unwrap();
        let masks = MaskVolume::from_frames(&[mask.clone(), mask]).unwrap();
        let s = subject_fidelity(&video, &reference, &masks, &ex).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn different_colored_subject_scores_low() {
        let ex = experts();
        let scene = generate_scene(&SceneDescriptor::default_scene()).unwrap();
        let (image, mask) = canonical_render(Shape::Circle, ColorName::Blue, 32);
        let reference = ex.vision_embedder.embed_image(image.view(), Some(mask.view())).unwrap();
        let s = subject_fidelity(&scene.video, &reference, &scene.masks[0], &ex).unwrap();
        assert!(s < 0.8, "{s}");
    }

    #[test]
    fn empty_masks_are_an_error() {
        let ex = experts();
        let scene = generate_scene(&SceneDescriptor::default_scene()).unwrap();
        let empty = MaskVolume::constant(8, 32, 32, 0.0).unwrap();
        let reference = ex.prior_converter.prior_convert("a red square").unwrap();
        assert!(subject_fidelity(&scene.video, &reference, &empty, &ex).is_err());
    }

    #[test]
    fn absent_color_prompt_scores_low() {
        let ex = experts();
        let scene = generate_scene(&SceneDescriptor::default_scene()).unwrap();
        let s = prompt_fidelity(&scene.video, "a magenta triangle on a striped background", &ex).unwrap();
        assert!(s < 0.5, "{s}");
    }
}
