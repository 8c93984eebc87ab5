use ndarray::{s, Array2, Array3, Array4};
use protagonist::experts::{
    embed_image, embed_text, prior_convert, segment_by_phrase, ExpertConfig, ExpertRegistry, SourceClip,
};
use protagonist::synthdata::{
    canonical_render, default_corpus, generate_scene, BackgroundStyle, ColorName, ProtagonistSpec, SceneDescriptor,
    Shape, Trajectory,
};
use protagonist::video::{MaskVolume, VideoTensor};

fn clip(desc: &SceneDescriptor) -> (VideoTensor, Vec<MaskVolume>) {
    let scene = generate_scene(desc).unwrap();
    (scene.video, scene.masks)
}

#[test]
fn captions_follow_the_template() {
    let experts = ExpertRegistry::oracle(32);
    let desc = SceneDescriptor::default_scene();
    let (video, _) = clip(&desc);
    let c = SourceClip {
        video: &video,
        descriptor: Some(&desc),
    };
    assert_eq!(
        experts.captioner.caption(c).unwrap(),
        "a red square moving right on a solid background"
    );
    assert_eq!(experts.protagonist_vqa.answer_protagonist(c).unwrap(), vec!["red square"]);
    let bare = SourceClip {
        video: &video,
        descriptor: None,
    };
    let err = experts.captioner.caption(bare).unwrap_err().to_string();
    assert!(err.contains("needs descriptor"), "{err}");
}

#[test]
fn two_protagonist_captions_join_with_and() {
    let experts = ExpertRegistry::oracle(32);
    let desc = default_corpus().into_iter().find(|d| d.protagonists.len() == 2).unwrap();
    let (video, _) = clip(&desc);
    let c = SourceClip {
        video: &video,
        descriptor: Some(&desc),
    };
    let caption = experts.captioner.caption(c).unwrap();
    assert_eq!(caption.matches(" and ").count(), 1, "{caption}");
    assert_eq!(experts.protagonist_vqa.answer_protagonist(c).unwrap().len(), 2);
}

#[test]
fn first_frame_segmentation_is_exact_on_solid_backgrounds() {
    let experts = ExpertRegistry::oracle(32);
    let (video, masks) = clip(&SceneDescriptor::default_scene());
    let seg = experts.segmenter.segment_first_frame(video.frame(0), "red square").unwrap();
    assert!(!seg.empty);
    assert_eq!(seg.mask, masks[0].frame(0).to_owned());
    let absent = experts.segmenter.segment_first_frame(video.frame(0), "cyan circle").unwrap();
    assert!(absent.empty);
    assert!(absent.mask.iter().all(|&v| v == 0.0));
    assert!(experts.segmenter.segment_first_frame(video.frame(0), "purple blob").is_err());
}

#[test]
fn segment_and_track_reach_high_iou_on_the_corpus() {
    let experts = ExpertRegistry::oracle(32);
    let mut ious = Vec::new();
    for desc in default_corpus() {
        let (video, masks) = clip(&desc);
        for (p, truth) in desc.protagonists.iter().zip(&masks) {
            let seg = experts.segmenter.segment_first_frame(video.frame(0), &p.phrase()).unwrap();
            let track = experts.tracker.track_masks(&video, &seg.mask).unwrap();
            assert!(!track.lost(), "{} lost", p.phrase());
            ious.push(track.masks.iou(truth));
        }
    }
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    assert!(mean >= 0.9, "mean IoU {mean} ({ious:?})");
}

#[test]
fn static_protagonist_track_repeats_the_first_mask() {
    let experts = ExpertRegistry::oracle(32);
    let mut desc = SceneDescriptor::default_scene();
    desc.protagonists[0].trajectory = Trajectory::Linear { start: [0.5, 0.5], velocity: [0.0, 0.0] };
    let (video, masks) = clip(&desc);
    let track = experts.tracker.track_masks(&video, &masks[0].frame(0).to_owned()).unwrap();
    for f in 0..video.frames() {
        assert_eq!(track.masks.frame(f), masks[0].frame(0));
    }
}

#[test]
fn track_is_flagged_when_the_object_vanishes() {
    let experts = ExpertRegistry::oracle(32);
    let (video, masks) = clip(&SceneDescriptor::default_scene());
    let mut data = video.data().clone();
    let bg = [data[[0, 0, 0, 0]], data[[0, 1, 0, 0]], data[[0, 2, 0, 0]]];
    for f in 4..video.frames() {
        for c in 0..3 {
            data.slice_mut(s![f, c, .., ..]).fill(bg[c]);
        }
    }
    let broken = VideoTensor::new(data).unwrap();
    let track = experts.tracker.track_masks(&broken, &masks[0].frame(0).to_owned()).unwrap();
    assert!(track.lost());
    assert!(track.lost_frames.contains(&4));
    assert_eq!(track.masks.frame(5), track.masks.frame(3));
}

#[test]
fn image_embedding_is_translation_tolerant_and_color_sensitive() {
    let (image, mask) = canonical_render(Shape::Square, ColorName::Red, 32);
    let shift = |a: &Array3<f64>, m: &Array2<f64>| {
        let mut a2 = Array3::zeros(a.dim());
        let mut m2 = Array2::zeros(m.dim());
        a2.slice_mut(s![.., 5.., 3..]).assign(&a.slice(s![.., ..27, ..29]));
        m2.slice_mut(s![5.., 3..]).assign(&m.slice(s![..27, ..29]));
        (a2, m2)
    };
    let (moved, moved_mask) = shift(&image, &mask);
    let e = embed_image(image.view(), Some(mask.view())).unwrap();
    let e_moved = embed_image(moved.view(), Some(moved_mask.view())).unwrap();
    assert!(e.cosine(&e_moved) >= 0.99);
    let (blue, _) = canonical_render(Shape::Square, ColorName::Blue, 32);
    let e_blue = embed_image(blue.view(), Some(mask.view())).unwrap();
    assert!(e.cosine(&e_blue) < 0.8);
    assert_eq!(e, embed_image(image.view(), Some(mask.view())).unwrap());
    assert!(embed_image(image.view(), Some(Array2::zeros((32, 32)).view())).is_err());
}

#[test]
fn text_embedding_is_a_bag_of_attributes() {
    let a = embed_text("red square");
    let b = embed_text("square red");
    assert_eq!(a, b);
    assert!(!a.neutral);
    let hot: Vec<usize> = a
        .embedding
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, _)| i)
        .collect();
    assert_eq!(hot.len(), 2);
    for i in hot {
        assert!((a.embedding.data()[i] - 0.5f64.sqrt()).abs() < 1e-12);
    }
    assert!(embed_text("").neutral);
    assert_eq!(embed_text("a red xyzzy square"), a);
}

#[test]
fn prior_matches_the_canonical_render() {
    let (image, mask) = canonical_render(Shape::Circle, ColorName::Blue, 32);
    let direct = embed_image(image.view(), Some(mask.view())).unwrap();
    assert_eq!(prior_convert("blue circle", 32).unwrap(), direct);
    assert!(prior_convert("hello world", 32).is_err());
}

#[test]
fn background_prior_puts_mass_in_the_named_hue() {
    let e = prior_convert("solid green background", 32).unwrap();
    let green = embed_image(
        Array3::from_shape_fn((3, 32, 32), |(c, _, _)| ColorName::Green.rgb()[c]).view(),
        None,
    )
    .unwrap();
    let red = embed_image(
        Array3::from_shape_fn((3, 32, 32), |(c, _, _)| ColorName::Red.rgb()[c]).view(),
        None,
    )
    .unwrap();
    assert!(e.cosine(&green) > e.cosine(&red));
}

#[test]
fn prior_is_consistent_with_in_scene_embeddings() {
    let mut worst = 0.0f64;
    for base in default_corpus() {
        for &color in ColorName::ALL {
            for &shape in Shape::ALL {
                let desc = SceneDescriptor {
                    protagonists: vec![ProtagonistSpec {
                        shape,
                        color,
                        trajectory: base.protagonists[0].trajectory.clone(),
                    }],
                    ..base.clone()
                };
                let (video, masks) = clip(&desc);
                let prior = prior_convert(&format!("{color} {shape}"), 32).unwrap();
                for f in 0..video.frames() {
                    let e = embed_image(video.frame(f), Some(masks[0].frame(f))).unwrap();
                    worst = worst.max((prior.cosine(&e) - 1.0).abs());
                }
            }
        }
    }
    assert!(worst <= 0.05, "worst cosine gap {worst}");
}

#[test]
fn control_is_zero_on_flat_frames_and_hugs_edges() {
    let experts = ExpertRegistry::oracle(32);
    let flat = VideoTensor::new(Array4::from_elem((2, 3, 8, 8), 0.3)).unwrap();
    assert!(experts.control_extractor.extract_control(&flat).data().iter().all(|&v| v == 0.0));

    let (video, masks) = clip(&SceneDescriptor::default_scene());
    let control = experts.control_extractor.extract_control(&video);
    assert!(control.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let m = masks[0].frame(0);
    let near_boundary = |y: usize, x: usize| {
        let inside = m[[y, x]] > 0.5;
        (y.saturating_sub(1)..=(y + 1).min(31))
            .flat_map(|yy| (x.saturating_sub(1)..=(x + 1).min(31)).map(move |xx| (yy, xx)))
            .any(|(yy, xx)| (m[[yy, xx]] > 0.5) != inside)
    };
    for ((y, x), &v) in control.data().slice(s![0, 0, .., ..]).indexed_iter() {
        if v > 0.0 {
            assert!(near_boundary(y, x), "edge response away from the boundary at ({y}, {x})");
        }
    }

    let brighter = video.map(|v| v + 0.1);
    let shifted = experts.control_extractor.extract_control(&brighter);
    let diff = (&shifted.data() - &control.data()).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(diff < 1e-12, "brightness offset changed control by {diff}");
}

#[test]
fn striped_background_sharing_the_hue_still_segments() {
    let experts = ExpertRegistry::oracle(32);
    let desc = default_corpus()
        .into_iter()
        .find(|d| d.background.style == BackgroundStyle::Stripes && d.background.color == d.protagonists[0].color)
        .expect("corpus has a same-hue striped scene");
    let (video, masks) = clip(&desc);
    let seg = experts
        .segmenter
        .segment_first_frame(video.frame(0), &desc.protagonists[0].phrase())
        .unwrap();
    let truth = MaskVolume::new(masks[0].data().slice(s![0..1, .., ..]).to_owned()).unwrap();
    let got = MaskVolume::new(seg.mask.insert_axis(ndarray::Axis(0))).unwrap();
    assert!(got.iou(&truth) >= 0.9);
}

#[test]
fn registry_config_rejects_unknown_implementations() {
    assert!(ExpertRegistry::from_config(&ExpertConfig::default(), 32).is_ok());
    let bad = ExpertConfig {
        tracker: "xmem".into(),
        ..Default::default()
    };
    let err = ExpertRegistry::from_config(&bad, 32).err().unwrap().to_string();
    assert!(err.contains("tracker"), "{err}");
}

#[test]
fn segmentation_is_deterministic() {
    let (video, _) = clip(&SceneDescriptor::default_scene());
    let a = segment_by_phrase(video.frame(2), "red square").unwrap();
    let b = segment_by_phrase(video.frame(2), "red square").unwrap();
    assert_eq!(a.mask, b.mask);
}
