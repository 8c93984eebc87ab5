use ndarray::{Array4, Axis};
use protagonist::denoiser::{spatialize_embedding, ConditioningBundle, ConditioningField, Denoiser, DenoiserConfig};
use protagonist::experts::{embed_text, ControlVolume};
use protagonist::rng::{normal_video, seeded_rng};
use protagonist::video::{Embedding, EmbeddingSpace, FrameEmbeddings, VideoTensor, EMBED_DIM};
use rand::Rng;

fn tiny(zero_init: bool) -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 8,
        levels: 1,
        frames: 3,
        resolution: 8,
        groups: 4,
        time_dim: 16,
        zero_init_output: zero_init,
        zero_init_attention: zero_init,
        ..Default::default()
    }
}

fn random_embedding(rng: &mut impl Rng) -> Embedding {
    let data = (0..EMBED_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    Embedding::new(ndarray::Array1::from_vec(data), EmbeddingSpace::Visual).unwrap()
}

fn random_bundle(cfg: &DenoiserConfig, seed: u64) -> (VideoTensor, ConditioningBundle) {
    let mut rng = seeded_rng(seed);
    let z = normal_video(&mut rng, [cfg.frames, 3, cfg.resolution, cfg.resolution]);
    let rows: Vec<Embedding> = (0..cfg.frames).map(|_| random_embedding(&mut rng)).collect();
    let field = spatialize_embedding(&FrameEmbeddings::per_frame(&rows).unwrap(), cfg.frames, &cfg.level_resolutions()).unwrap();
    let control = Array4::from_shape_fn((cfg.frames, 1, cfg.resolution, cfg.resolution), |_| rng.random_range(0.0..1.0));
    let cond = ConditioningBundle {
        text: Some(embed_text("a red square moving right").embedding),
        image_field: field,
        control: Some(ControlVolume::new(control).unwrap()),
    };
    (z, cond)
}

#[test]
fn zero_initialised_model_is_the_zero_map() {
    let cfg = tiny(true);
    let model = Denoiser::new(cfg.clone(), &mut seeded_rng(0)).unwrap();
    let (z, cond) = random_bundle(&cfg, 1);
    let v = model.denoise(&z, 500, &cond).unwrap();
    assert!(v.data().iter().all(|&x| x == 0.0));
}

#[test]
fn parameter_count_does_not_depend_on_seed() {
    let a = Denoiser::new(DenoiserConfig::default(), &mut seeded_rng(0)).unwrap();
    let b = Denoiser::new(DenoiserConfig::default(), &mut seeded_rng(9)).unwrap();
    assert_eq!(a.num_parameters(), b.num_parameters());
    assert!(a.num_parameters() > 0);
}

#[test]
fn forward_is_deterministic() {
    let cfg = tiny(false);
    let model = Denoiser::new(cfg.clone(), &mut seeded_rng(4)).unwrap();
    let (z, cond) = random_bundle(&cfg, 2);
    let a = model.denoise(&z, 321, &cond).unwrap();
    let b = model.denoise(&z, 321, &cond).unwrap();
    assert_eq!(a, b);
}

#[test]
fn shape_and_timestep_are_validated() {
    let cfg = tiny(true);
    let model = Denoiser::new(cfg.clone(), &mut seeded_rng(0)).unwrap();
    let (z, cond) = random_bundle(&cfg, 1);
    assert!(model.denoise(&z, cfg.train_steps + 1, &cond).is_err());
    let wrong = VideoTensor::zeros(cfg.frames, 3, 4, 4);
    assert!(model.denoise(&wrong, 10, &cond).is_err());
    let bad_field = ConditioningBundle {
        image_field: ConditioningField::zeros(cfg.frames, &[8]),
        ..cond
    };
    assert!(model.denoise(&z, 10, &bad_field).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = tiny(false);
    let model = Denoiser::new(cfg.clone(), &mut seeded_rng(5)).unwrap();
    let (z, cond) = random_bundle(&cfg, 6);
    let target = normal_video(&mut seeded_rng(7), z.shape());
    let params = model.params().cast::<f64>();
    let (_, grads) = model.loss_and_gradients(&params, &z, 400, &cond, &target).unwrap();
    let mut rng = seeded_rng(8);
    let mut checked = 0;
    while checked < 10 {
        let p = rng.random_range(0..params.len());
        let i = rng.random_range(0..params.value(p).len());
        let analytic = grads[p].data[i];
        let h = 1e-5;
        let mut plus = params.clone();
        plus.value_mut(p).data[i] += h;
        let mut minus = params.clone();
        minus.value_mut(p).data[i] -= h;
        let lp = model.loss_with(&plus, &z, 400, &cond, &target).unwrap();
        let lm = model.loss_with(&minus, &z, 400, &cond, &target).unwrap();
        let numeric = (lp - lm) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(
            (analytic - numeric).abs() <= 1e-3 * scale,
            "{}[{i}]: analytic {analytic:.6e} numeric {numeric:.6e}",
            params.name(p)
        );
        checked += 1;
    }
}

fn permute_frames(a: &Array4<f64>, perm: &[usize]) -> Array4<f64> {
    a.select(Axis(0), perm)
}

#[test]
fn frame_permutation_equivariance_without_positional_encoding() {
    let cfg = DenoiserConfig {
        temporal_positional_encoding: false,
        ..tiny(false)
    };
    let model = Denoiser::new(cfg.clone(), &mut seeded_rng(11)).unwrap();
    let (z, cond) = random_bundle(&cfg, 12);
    let perm = [2, 0, 1];
    let zp = VideoTensor::new(permute_frames(z.data(), &perm)).unwrap();
    let levels = cond.image_field.levels().iter().map(|l| permute_frames(l, &perm)).collect();
    let control = cond.control.as_ref().unwrap().data().select(Axis(0), &perm);
    let condp = ConditioningBundle {
        text: cond.text.clone(),
        image_field: ConditioningField::new(levels).unwrap(),
        control: Some(ControlVolume::new(control).unwrap()),
    };
    let v = model.denoise(&z, 250, &cond).unwrap();
    let vp = model.denoise(&zp, 250, &condp).unwrap();
    let expected = permute_frames(v.data(), &perm);
    let err = (&expected - vp.data()).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(err < 1e-4, "max deviation {err}");
}

#[test]
fn positional_encoding_breaks_permutation_symmetry() {
    let cfg = tiny(false);
    let model = Denoiser::new(cfg.clone(), &mut seeded_rng(11)).unwrap();
    let mut rng = seeded_rng(3);
    let frame = normal_video(&mut rng, [1, 3, 8, 8]);
    let same = ndarray::concatenate(Axis(0), &[frame.data().view(), frame.data().view(), frame.data().view()]).unwrap();
    let z = VideoTensor::new(same).unwrap();
    let e = random_embedding(&mut rng);
    let cond = ConditioningBundle {
        text: None,
        image_field: spatialize_embedding(&FrameEmbeddings::single(&e), 3, &cfg.level_resolutions()).unwrap(),
        control: None,
    };
    let v = model.denoise(&z, 100, &cond).unwrap();
    let d = (&v.data().index_axis(Axis(0), 0) - &v.data().index_axis(Axis(0), 1)).iter().fold(0.0f64, |m, x| m.max(x.abs()));
    assert!(d > 1e-6, "identical frames stayed identical with positional encoding: {d}");
}

#[test]
fn every_conditioning_input_is_live() {
    let cfg = tiny(false);
    let model = Denoiser::new(cfg.clone(), &mut seeded_rng(13)).unwrap();
    let (z, cond) = random_bundle(&cfg, 14);
    let base = model.denoise(&z, 300, &cond).unwrap();
    let variants = [
        ConditioningBundle {
            text: None,
            ..cond.clone()
        },
        ConditioningBundle {
            control: None,
            ..cond.clone()
        },
        ConditioningBundle {
            image_field: ConditioningField::zeros(cfg.frames, &cfg.level_resolutions()),
            ..cond.clone()
        },
    ];
    for (i, c) in variants.iter().enumerate() {
        let v = model.denoise(&z, 300, c).unwrap();
        assert!(v.rms_diff(&base).unwrap() > 1e-6, "input {i} had no effect");
    }
    let later = model.denoise(&z, 301, &cond).unwrap();
    assert!(later.rms_diff(&base).unwrap() > 0.0);
}

#[test]
fn broadcast_field_equals_spatialized_field() {
    let cfg = tiny(false);
    let model = Denoiser::new(cfg.clone(), &mut seeded_rng(15)).unwrap();
    let (z, cond) = random_bundle(&cfg, 16);
    let e = random_embedding(&mut seeded_rng(17));
    let spatial = spatialize_embedding(&FrameEmbeddings::single(&e), cfg.frames, &cfg.level_resolutions()).unwrap();
    let pooled = ConditioningField::new(
        cfg.level_resolutions()
            .iter()
            .map(|_| Array4::from_shape_fn((cfg.frames, EMBED_DIM, 1, 1), |(_, c, _, _)| e.data()[c]))
            .collect(),
    )
    .unwrap();
    let a = model
        .denoise(&z, 50, &ConditioningBundle { image_field: spatial, ..cond.clone() })
        .unwrap();
    let b = model.denoise(&z, 50, &ConditioningBundle { image_field: pooled, ..cond }).unwrap();
    assert!(a.rms_diff(&b).unwrap() < 1e-6);
}
