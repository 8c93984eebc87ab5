//! Temporally inflated U-shaped network predicting v from a noisy clip,
//! its timestep, a text embedding, a per-pixel image-conditioning field and
//! an edge control map.

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ControlVolume;
use crate::nn::{AttnMode, Graph, Init, ParamSet, Real, Tensor, Var};
use crate::schedules::DEFAULT_TRAIN_STEPS;
use crate::video::{Embedding, FrameEmbeddings, VideoTensor, EMBED_DIM};

const LATENT_CHANNELS: usize = 3;
const TIME_FEATURES: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    /// Number of 2× downsamplings.
    pub levels: usize,
    pub frames: usize,
    pub resolution: usize,
    pub embed_dim: usize,
    pub attention_at_lowest: bool,
    pub temporal_attention: bool,
    pub temporal_positional_encoding: bool,
    pub zero_init_output: bool,
    /// Zero-initialize attention output projections so every attention block starts as identity.
    pub zero_init_attention: bool,
    pub groups: usize,
    pub time_dim: usize,
    pub train_steps: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            levels: 2,
            frames: 8,
            resolution: 32,
            embed_dim: EMBED_DIM,
            attention_at_lowest: true,
            temporal_attention: true,
            temporal_positional_encoding: true,
            zero_init_output: true,
            zero_init_attention: true,
            groups: 8,
            time_dim: 128,
            train_steps: DEFAULT_TRAIN_STEPS,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.frames == 0 || self.resolution == 0 || self.base_channels == 0 {
            return bad("frames, resolution and base_channels must be positive".into());
        }
        if self.resolution % (1 << self.levels) != 0 {
            return bad(format!(
                "resolution {} is not divisible by 2^{}",
                self.resolution, self.levels
            ));
        }
        if self.groups == 0 || self.base_channels % self.groups != 0 {
            return bad(format!(
                "base_channels {} not divisible by groups {}",
                self.base_channels, self.groups
            ));
        }
        if self.embed_dim != EMBED_DIM {
            return bad(format!("embed_dim must be {EMBED_DIM}"));
        }
        if self.train_steps == 0 || self.time_dim == 0 {
            return bad("train_steps and time_dim must be positive".into());
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * (1usize << level.min(1))
    }

    /// Side length of the feature maps at `level`.
    pub fn level_resolution(&self, level: usize) -> usize {
        self.resolution >> level
    }

    /// Side lengths of every level, finest first.
    pub fn level_resolutions(&self) -> Vec<usize> {
        (0..=self.levels).map(|l| self.level_resolution(l)).collect()
    }
}

/// Per-level maps `[frames, embed_dim, h, w]`; a level may also be `[frames, embed_dim, 1, 1]`
/// and is then broadcast over positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningField {
    levels: Vec<Array4<f64>>,
}

impl ConditioningField {
    pub fn new(levels: Vec<Array4<f64>>) -> Result<Self> {
        let Some(first) = levels.first() else {
            return Err(Error::Invalid("conditioning field has no levels".into()));
        };
        let (f, c) = (first.shape()[0], first.shape()[1]);
        for l in &levels {
            if l.shape()[0] != f || l.shape()[1] != c {
                return Err(Error::Shape(format!(
                    "conditioning field levels disagree: {:?} vs {:?}",
                    l.shape(),
                    first.shape()
                )));
            }
        }
        Ok(Self { levels })
    }

    pub fn zeros(frames: usize, resolutions: &[usize]) -> Self {
        Self {
            levels: resolutions
                .iter()
                .map(|&r| Array4::zeros((frames, EMBED_DIM, r, r)))
                .collect(),
        }
    }

    pub fn levels(&self) -> &[Array4<f64>] {
        &self.levels
    }

    pub fn level(&self, l: usize) -> &Array4<f64> {
        &self.levels[l]
    }

    pub fn frames(&self) -> usize {
        self.levels[0].shape()[0]
    }

    /// Spatial average of frame `f` at level `l`.
    pub fn mean_embedding(&self, l: usize, f: usize) -> Vec<f64> {
        let lv = &self.levels[l];
        let (h, w) = (lv.shape()[2], lv.shape()[3]);
        (0..lv.shape()[1])
            .map(|c| lv.slice(ndarray::s![f, c, .., ..]).sum() / (h * w) as f64)
            .collect()
    }

    /// Bitwise equality, used to skip duplicate forward passes.
    pub fn identical(&self, other: &ConditioningField) -> bool {
        self.levels.len() == other.levels.len()
            && self.levels.iter().zip(&other.levels).all(|(a, b)| {
                a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Broadcasts embeddings to every position of every level; frame `f` holds row `f`.
pub fn spatialize_embedding(per_frame: &FrameEmbeddings, frames: usize, resolutions: &[usize]) -> Result<ConditioningField> {
    per_frame.ensure_frames(frames)?;
    let levels = resolutions
        .iter()
        .map(|&r| {
            let mut a = Array4::zeros((frames, EMBED_DIM, r, r));
            for f in 0..frames {
                let row = per_frame.row(f);
                for (c, &v) in row.iter().enumerate() {
                    a.slice_mut(ndarray::s![f, c, .., ..]).fill(v);
                }
            }
            a
        })
        .collect();
    ConditioningField::new(levels)
}

/// Everything the denoiser is conditioned on besides `z_t` and `t`.
#[derive(Debug, Clone)]
pub struct ConditioningBundle {
    /// `None` is the null text condition.
    pub text: Option<Embedding>,
    pub image_field: ConditioningField,
    pub control: Option<ControlVolume>,
}

impl ConditioningBundle {
    /// Null text and zero image field; the control signal is kept.
    pub fn unconditional(&self) -> ConditioningBundle {
        let resolutions: Vec<usize> = self.image_field.levels().iter().map(|l| l.shape()[2]).collect();
        ConditioningBundle {
            text: None,
            image_field: ConditioningField::zeros(self.image_field.frames(), &resolutions),
            control: self.control.clone(),
        }
    }
}

struct Conv {
    w: usize,
    b: Option<usize>,
    k: usize,
    stride: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(
        ps: &mut ParamSet<f32>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        zero: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let init = if zero { Init::Zeros } else { Init::FanIn(fan_in) };
        let w = ps.add(&format!("{name}.weight"), [cout, fan_in, 1, 1], init, rng);
        let b = bias.then(|| ps.add(&format!("{name}.bias"), [cout, 1, 1, 1], Init::Zeros, rng));
        Self { w, b, k, stride }
    }

    fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.conv2d(x, w, b, self.k, self.stride)
    }
}

struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

impl Norm {
    fn new<R: Rng>(ps: &mut ParamSet<f32>, name: &str, channels: usize, groups: usize, rng: &mut R) -> Self {
        Self {
            gamma: ps.add(&format!("{name}.gamma"), [channels, 1, 1, 1], Init::Ones, rng),
            beta: ps.add(&format!("{name}.beta"), [channels, 1, 1, 1], Init::Zeros, rng),
            groups,
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.group_norm(x, gamma, beta, self.groups)
    }
}

fn groups_for(channels: usize, groups: usize) -> usize {
    let mut g = groups.min(channels);
    while channels % g != 0 {
        g -= 1;
    }
    g
}

struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    time: Conv,
    field: Conv,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
    channels: usize,
}

impl ResBlock {
    fn new<R: Rng>(ps: &mut ParamSet<f32>, name: &str, cin: usize, cout: usize, cfg: &DenoiserConfig, rng: &mut R) -> Self {
        Self {
            norm1: Norm::new(ps, &format!("{name}.norm1"), cin, groups_for(cin, cfg.groups), rng),
            conv1: Conv::new(ps, &format!("{name}.conv1"), cin, cout, 3, 1, true, false, rng),
            time: Conv::new(ps, &format!("{name}.time"), cfg.time_dim, cout, 1, 1, true, false, rng),
            field: Conv::new(ps, &format!("{name}.field"), cfg.embed_dim, cout, 1, 1, false, false, rng),
            norm2: Norm::new(ps, &format!("{name}.norm2"), cout, groups_for(cout, cfg.groups), rng),
            conv2: Conv::new(ps, &format!("{name}.conv2"), cout, cout, 3, 1, true, false, rng),
            skip: (cin != cout).then(|| Conv::new(ps, &format!("{name}.skip"), cin, cout, 1, 1, true, false, rng)),
            channels: cout,
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, ctx: &Context) -> Var {
        let h = self.norm1.apply(g, x);
        let h = g.silu(h);
        let h = self.conv1.apply(g, h);
        let t = self.time.apply(g, ctx.time);
        let h = g.add_broadcast(h, t);
        let level = ctx.level_of(g.value(h).height());
        let f = self.field.apply(g, ctx.fields[level]);
        let h = if g.value(f).height() == 1 {
            g.add_broadcast(h, f)
        } else {
            g.add(h, f)
        };
        let h = self.norm2.apply(g, h);
        let h = g.silu(h);
        let h = self.conv2.apply(g, h);
        let s = match &self.skip {
            Some(s) => s.apply(g, x),
            None => x,
        };
        g.add(s, h)
    }
}

struct AttnBlock {
    norm: Norm,
    q: Conv,
    k: Conv,
    v: Conv,
    out: Conv,
    mode: AttnMode,
}

impl AttnBlock {
    fn new<R: Rng>(ps: &mut ParamSet<f32>, name: &str, channels: usize, mode: AttnMode, cfg: &DenoiserConfig, rng: &mut R) -> Self {
        let kv_in = if mode == AttnMode::Cross { cfg.embed_dim } else { channels };
        Self {
            norm: Norm::new(ps, &format!("{name}.norm"), channels, groups_for(channels, cfg.groups), rng),
            q: Conv::new(ps, &format!("{name}.q"), channels, channels, 1, 1, false, false, rng),
            k: Conv::new(ps, &format!("{name}.k"), kv_in, channels, 1, 1, true, false, rng),
            v: Conv::new(ps, &format!("{name}.v"), kv_in, channels, 1, 1, true, false, rng),
            out: Conv::new(ps, &format!("{name}.out"), channels, channels, 1, 1, true, cfg.zero_init_attention, rng),
            mode,
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, ctx: &Context) -> Var {
        let mut h = self.norm.apply(g, x);
        if self.mode == AttnMode::Temporal {
            if let Some(pe) = ctx.temporal_pe(g.value(h).channels()) {
                h = g.add_broadcast(h, pe);
            }
        }
        let q = self.q.apply(g, h);
        let src = if self.mode == AttnMode::Cross { ctx.text } else { h };
        let k = self.k.apply(g, src);
        let v = self.v.apply(g, src);
        let a = g.attention(q, k, v, self.mode);
        let o = self.out.apply(g, a);
        g.add(x, o)
    }
}

/// A residual block followed by text cross-attention and optional temporal attention.
struct Stage {
    res: ResBlock,
    spatial: Option<AttnBlock>,
    cross: AttnBlock,
    temporal: Option<AttnBlock>,
}

impl Stage {
    fn new<R: Rng>(ps: &mut ParamSet<f32>, name: &str, cin: usize, cout: usize, spatial: bool, cfg: &DenoiserConfig, rng: &mut R) -> Self {
        Self {
            res: ResBlock::new(ps, &format!("{name}.res"), cin, cout, cfg, rng),
            spatial: spatial.then(|| AttnBlock::new(ps, &format!("{name}.spatial"), cout, AttnMode::Spatial, cfg, rng)),
            cross: AttnBlock::new(ps, &format!("{name}.cross"), cout, AttnMode::Cross, cfg, rng),
            temporal: cfg
                .temporal_attention
                .then(|| AttnBlock::new(ps, &format!("{name}.temporal"), cout, AttnMode::Temporal, cfg, rng)),
        }
    }

    fn apply<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, ctx: &Context) -> Var {
        let mut h = self.res.apply(g, x, ctx);
        if let Some(s) = &self.spatial {
            h = s.apply(g, h, ctx);
        }
        h = self.cross.apply(g, h, ctx);
        if let Some(t) = &self.temporal {
            h = t.apply(g, h, ctx);
        }
        debug_assert_eq!(g.value(h).channels(), self.res.channels);
        h
    }
}

struct Layout {
    conv_in: Conv,
    time1: Conv,
    time2: Conv,
    down: Vec<(Stage, Conv)>,
    mid: Stage,
    up: Vec<(Conv, Stage)>,
    norm_out: Norm,
    conv_out: Conv,
}

/// Graph handles shared by every block of one forward pass.
struct Context {
    time: Var,
    text: Var,
    fields: Vec<Var>,
    resolutions: Vec<usize>,
    pe: Vec<(usize, Var)>,
}

impl Context {
    fn level_of(&self, height: usize) -> usize {
        self.resolutions
            .iter()
            .position(|&r| r == height)
            .expect("feature map at a known level")
    }

    fn temporal_pe(&self, channels: usize) -> Option<Var> {
        self.pe.iter().find(|(c, _)| *c == channels).map(|&(_, v)| v)
    }
}

/// Sinusoidal features of a scalar position, `dim` values.
fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (pos * freq).sin();
        out[half + i] = (pos * freq).cos();
    }
    out
}

/// Inputs already converted to channel-major tensors.
pub(crate) struct NetInputs<T> {
    pub x: Tensor<T>,
    pub time: Tensor<T>,
    pub text: Tensor<T>,
    pub fields: Vec<Tensor<T>>,
}

pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamSet<f32>,
    layout: Layout,
}

impl Denoiser {
    pub fn new<R: Rng>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let cfg = &config;
        let ps_ = &mut ps;
        let c0 = cfg.channels(0);
        let conv_in = Conv::new(ps_, "conv_in", LATENT_CHANNELS + 1, c0, 3, 1, true, false, rng);
        let time1 = Conv::new(ps_, "time.lin1", TIME_FEATURES, cfg.time_dim, 1, 1, true, false, rng);
        let time2 = Conv::new(ps_, "time.lin2", cfg.time_dim, cfg.time_dim, 1, 1, true, false, rng);
        let mut down = Vec::new();
        let mut cin = c0;
        for l in 0..cfg.levels {
            let c = cfg.channels(l);
            let stage = Stage::new(ps_, &format!("down{l}"), cin, c, false, cfg, rng);
            let pool = Conv::new(ps_, &format!("down{l}.pool"), c, c, 3, 2, true, false, rng);
            down.push((stage, pool));
            cin = c;
        }
        let cm = cfg.channels(cfg.levels);
        let mid = Stage::new(ps_, "mid", cin, cm, cfg.attention_at_lowest, cfg, rng);
        let mut up = Vec::new();
        let mut cprev = cm;
        for l in (0..cfg.levels).rev() {
            let c = cfg.channels(l);
            let conv = Conv::new(ps_, &format!("up{l}.conv"), cprev, c, 3, 1, true, false, rng);
            let stage = Stage::new(ps_, &format!("up{l}"), 2 * c, c, false, cfg, rng);
            up.push((conv, stage));
            cprev = c;
        }
        let norm_out = Norm::new(ps_, "norm_out", c0, groups_for(c0, cfg.groups), rng);
        let conv_out = Conv::new(ps_, "conv_out", c0, LATENT_CHANNELS, 3, 1, true, cfg.zero_init_output, rng);
        Ok(Self {
            layout: Layout {
                conv_in,
                time1,
                time2,
                down,
                mid,
                up,
                norm_out,
                conv_out,
            },
            params: ps,
            config,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Converts and validates inputs for one forward pass.
    pub(crate) fn prepare<T: Real>(&self, z_t: &VideoTensor, t: usize, cond: &ConditioningBundle) -> Result<NetInputs<T>> {
        let cfg = &self.config;
        let [f, c, h, w] = z_t.shape();
        if c != LATENT_CHANNELS || f != cfg.frames || h != cfg.resolution || w != cfg.resolution {
            return Err(Error::Shape(format!(
                "denoiser expects [{}, {LATENT_CHANNELS}, {}, {}], got {:?}",
                cfg.frames,
                cfg.resolution,
                cfg.resolution,
                z_t.shape()
            )));
        }
        if t > cfg.train_steps {
            return Err(Error::Invalid(format!("timestep {t} outside [0, {}]", cfg.train_steps)));
        }
        if let Some(ctrl) = &cond.control {
            ctrl.ensure_matches(z_t)?;
        }
        let resolutions = cfg.level_resolutions();
        if cond.image_field.levels().len() != resolutions.len() || cond.image_field.frames() != f {
            return Err(Error::Shape(format!(
                "conditioning field has {} levels for {} frames; model needs {} levels for {f}",
                cond.image_field.levels().len(),
                cond.image_field.frames(),
                resolutions.len()
            )));
        }
        let mut x = Tensor::zeros([LATENT_CHANNELS + 1, f, h, w]);
        let plane = h * w;
        let zd = z_t.data();
        for ch in 0..LATENT_CHANNELS {
            for fi in 0..f {
                let dst = &mut x.data[(ch * f + fi) * plane..][..plane];
                for (d, &v) in dst.iter_mut().zip(zd.slice(ndarray::s![fi, ch, .., ..]).iter()) {
                    *d = T::of(v);
                }
            }
        }
        if let Some(ctrl) = &cond.control {
            let cd = ctrl.data();
            for fi in 0..f {
                let dst = &mut x.data[(LATENT_CHANNELS * f + fi) * plane..][..plane];
                for (d, &v) in dst.iter_mut().zip(cd.slice(ndarray::s![fi, 0, .., ..]).iter()) {
                    *d = T::of(v);
                }
            }
        }
        let time = Tensor::from_vec([TIME_FEATURES, 1, 1, 1], sinusoid(t as f64, TIME_FEATURES).into_iter().map(T::of).collect());
        let mut text = Tensor::zeros([cfg.embed_dim, 2, 1, 1]);
        if let Some(e) = &cond.text {
            for (i, &v) in e.data().iter().enumerate() {
                text.data[i * 2 + 1] = T::of(v);
            }
        }
        let mut fields = Vec::with_capacity(resolutions.len());
        for (lv, &r) in cond.image_field.levels().iter().zip(&resolutions) {
            let s = lv.shape();
            if s[1] != cfg.embed_dim || !((s[2] == r && s[3] == r) || (s[2] == 1 && s[3] == 1)) {
                return Err(Error::Shape(format!("conditioning level {:?} does not fit resolution {r}", s)));
            }
            let (lh, lw) = (s[2], s[3]);
            let mut tsr = Tensor::zeros([cfg.embed_dim, f, lh, lw]);
            for ch in 0..cfg.embed_dim {
                for fi in 0..f {
                    let dst = &mut tsr.data[(ch * f + fi) * lh * lw..][..lh * lw];
                    for (d, &v) in dst.iter_mut().zip(lv.slice(ndarray::s![fi, ch, .., ..]).iter()) {
                        *d = T::of(v);
                    }
                }
            }
            fields.push(tsr);
        }
        Ok(NetInputs { x, time, text, fields })
    }

    /// Builds the forward pass on `g`; returns the `[3, F, H, W]` v prediction.
    pub(crate) fn forward<'p, T: Real>(&self, g: &mut Graph<'p, T>, inputs: &NetInputs<T>) -> Var {
        let cfg = &self.config;
        let l = &self.layout;
        let x = g.constant(inputs.x.clone());
        let temb = g.constant(inputs.time.clone());
        let temb = l.time1.apply(g, temb);
        let temb = g.silu(temb);
        let temb = l.time2.apply(g, temb);
        let time = g.silu(temb);
        let text = g.constant(inputs.text.clone());
        let fields = inputs.fields.iter().map(|f| g.constant(f.clone())).collect();
        let mut pe = Vec::new();
        if cfg.temporal_attention && cfg.temporal_positional_encoding {
            let mut chans: Vec<usize> = (0..=cfg.levels).map(|lv| cfg.channels(lv)).collect();
            chans.dedup();
            for c in chans {
                let mut data = vec![T::zero(); c * cfg.frames];
                for f in 0..cfg.frames {
                    for (ch, v) in sinusoid(f as f64, c).into_iter().enumerate() {
                        data[ch * cfg.frames + f] = T::of(v);
                    }
                }
                let v = g.constant(Tensor::from_vec([c, cfg.frames, 1, 1], data));
                pe.push((c, v));
            }
        }
        let ctx = Context {
            time,
            text,
            fields,
            resolutions: cfg.level_resolutions(),
            pe,
        };
        let mut h = l.conv_in.apply(g, x);
        let mut skips = Vec::new();
        for (stage, pool) in &l.down {
            h = stage.apply(g, h, &ctx);
            skips.push(h);
            h = pool.apply(g, h);
        }
        h = l.mid.apply(g, h, &ctx);
        for (conv, stage) in &l.up {
            let u = g.upsample2x(h);
            let u = conv.apply(g, u);
            let s = skips.pop().expect("one skip per level");
            let c = g.concat_channels(u, s);
            h = stage.apply(g, c, &ctx);
        }
        let h = l.norm_out.apply(g, h);
        let h = g.silu(h);
        l.conv_out.apply(g, h)
    }

    /// Runs `forward` with another copy of the parameters (e.g. f64 for gradient checks).
    pub(crate) fn forward_with<'p, T: Real>(&self, params: &'p ParamSet<T>, record: bool, inputs: &NetInputs<T>) -> (Graph<'p, T>, Var) {
        let mut g = Graph::new(params, record);
        let out = self.forward(&mut g, inputs);
        (g, out)
    }

    /// Mean squared error of the prediction against `target` and its gradient
    /// for every parameter, evaluated with `params` (laid out like [`Denoiser::params`]).
    pub fn loss_and_gradients<T: Real>(
        &self,
        params: &ParamSet<T>,
        z_t: &VideoTensor,
        t: usize,
        cond: &ConditioningBundle,
        target: &VideoTensor,
    ) -> Result<(f64, Vec<Tensor<T>>)> {
        target.ensure_same_shape(z_t, "v target")?;
        let inputs = self.prepare::<T>(z_t, t, cond)?;
        let (mut g, out) = self.forward_with(params, true, &inputs);
        let tv = g.constant(video_to_tensor(target));
        let loss = g.mse(out, tv);
        let value = g.value(loss).data[0].to_f64().unwrap_or(f64::NAN);
        Ok((value, g.backward(loss)))
    }

    /// Mean squared error only, evaluated with `params`.
    pub fn loss_with<T: Real>(
        &self,
        params: &ParamSet<T>,
        z_t: &VideoTensor,
        t: usize,
        cond: &ConditioningBundle,
        target: &VideoTensor,
    ) -> Result<f64> {
        target.ensure_same_shape(z_t, "v target")?;
        let inputs = self.prepare::<T>(z_t, t, cond)?;
        let (mut g, out) = self.forward_with(params, false, &inputs);
        let tv = g.constant(video_to_tensor(target));
        let loss = g.mse(out, tv);
        Ok(g.value(loss).data[0].to_f64().unwrap_or(f64::NAN))
    }

    /// The v prediction for `z_t` at timestep `t` (0 is allowed for inversion's first rung).
    pub fn denoise(&self, z_t: &VideoTensor, t: usize, cond: &ConditioningBundle) -> Result<VideoTensor> {
        let inputs = self.prepare::<f32>(z_t, t, cond)?;
        let (g, out) = self.forward_with(&self.params, false, &inputs);
        let v = tensor_to_video(g.value(out));
        if !v.is_finite() {
            return Err(Error::Numerical(format!("denoiser produced non-finite output at t={t}")));
        }
        Ok(v)
    }
}

/// Channel-major `[C, F, H, W]` to a frame-major video.
pub(crate) fn tensor_to_video<T: Real>(t: &Tensor<T>) -> VideoTensor {
    let [c, f, h, w] = t.shape;
    let data = Array4::from_shape_fn((f, c, h, w), |(fi, ch, y, x)| t.data[((ch * f + fi) * h + y) * w + x].to_f64().unwrap());
    VideoTensor::new(data).expect("nonempty tensor")
}

/// Channel-major copy of a frame-major video.
pub(crate) fn video_to_tensor<T: Real>(v: &VideoTensor) -> Tensor<T> {
    let [f, c, h, w] = v.shape();
    let d = v.data();
    let mut out = Tensor::zeros([c, f, h, w]);
    for ch in 0..c {
        for fi in 0..f {
            for y in 0..h {
                for x in 0..w {
                    out.data[((ch * f + fi) * h + y) * w + x] = T::of(d[[fi, ch, y, x]]);
                }
            }
        }
    }
    out
}
