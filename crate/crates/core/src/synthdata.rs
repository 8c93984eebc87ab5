//! Toy videos of moving shapes over simple backgrounds, with exact masks.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{MaskVolume, VideoTensor};

/// Side of a rendered shape as a fraction of the frame height.
pub const CANONICAL_SCALE: f64 = 0.4;
pub const DEFAULT_FRAMES: usize = 8;
pub const DEFAULT_RESOLUTION: usize = 32;
/// Width in pixels of one stripe of a striped background.
pub const STRIPE_WIDTH: usize = 4;

macro_rules! vocabulary {
    ($name:ident, $kind:literal, [$($variant:ident => $word:literal),+ $(,)?]) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                $name::ALL
                    .iter()
                    .copied()
                    .find(|v| v.word() == s)
                    .ok_or_else(|| {
                        let words: Vec<_> = $name::ALL.iter().map(|v| v.word()).collect();
                        Error::Invalid(format!("unknown {} {s:?}; expected one of {}", $kind, words.join(", ")))
                    })
            }
        }
    };
}

vocabulary!(Shape, "shape", [Square => "square", Circle => "circle", Triangle => "triangle"]);
vocabulary!(ColorName, "color", [
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Magenta => "magenta",
    Cyan => "cyan",
]);
vocabulary!(BackgroundStyle, "background style", [Solid => "solid", Gradient => "gradient", Stripes => "striped"]);

impl ColorName {
    /// Saturated RGB corner in [-1, 1]³.
    pub fn rgb(self) -> [f64; 3] {
        match self {
            ColorName::Red => [1.0, -1.0, -1.0],
            ColorName::Green => [-1.0, 1.0, -1.0],
            ColorName::Blue => [-1.0, -1.0, 1.0],
            ColorName::Yellow => [1.0, 1.0, -1.0],
            ColorName::Magenta => [1.0, -1.0, 1.0],
            ColorName::Cyan => [-1.0, 1.0, 1.0],
        }
    }

    /// The vocabulary color with exactly this RGB corner, if any.
    pub fn from_rgb(rgb: [f64; 3]) -> Option<ColorName> {
        ColorName::ALL.iter().copied().find(|c| c.rgb() == rgb)
    }

    /// Light and dark background tones derived from this hue.
    pub fn background_tones(self) -> ([f64; 3], [f64; 3]) {
        let c = self.rgb();
        (c.map(|v| 0.4 * v + 0.2), c.map(|v| 0.4 * v - 0.2))
    }
}

/// Direction word used in captions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Right,
    Left,
    Up,
    Down,
    Around,
    Still,
}

impl Direction {
    pub const ALL: &'static [Direction] = &[
        Direction::Right,
        Direction::Left,
        Direction::Up,
        Direction::Down,
        Direction::Around,
        Direction::Still,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Direction::Right => "right",
            Direction::Left => "left",
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Around => "around",
            Direction::Still => "still",
        }
    }
}

/// Path of a shape's center in normalized coordinates (x right, y down, both in [0, 1]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Trajectory {
    /// `velocity` is in frame widths per frame.
    Linear { start: [f64; 2], velocity: [f64; 2] },
    /// `angular_rate` is in radians per frame.
    Circular {
        center: [f64; 2],
        radius: f64,
        angular_rate: f64,
        #[serde(default)]
        phase: f64,
    },
}

impl Trajectory {
    pub fn position(&self, frame: usize) -> [f64; 2] {
        let f = frame as f64;
        match *self {
            Trajectory::Linear { start, velocity } => [start[0] + velocity[0] * f, start[1] + velocity[1] * f],
            Trajectory::Circular {
                center,
                radius,
                angular_rate,
                phase,
            } => {
                let a = phase + angular_rate * f;
                [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
            }
        }
    }

    pub fn direction(&self) -> Direction {
        match *self {
            Trajectory::Circular { radius, angular_rate, .. } if radius > 0.0 && angular_rate != 0.0 => Direction::Around,
            Trajectory::Circular { .. } => Direction::Still,
            Trajectory::Linear { velocity: [vx, vy], .. } => {
                if vx == 0.0 && vy == 0.0 {
                    Direction::Still
                } else if vx.abs() >= vy.abs() {
                    if vx > 0.0 {
                        Direction::Right
                    } else {
                        Direction::Left
                    }
                } else if vy > 0.0 {
                    Direction::Down
                } else {
                    Direction::Up
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtagonistSpec {
    pub shape: Shape,
    pub color: ColorName,
    pub trajectory: Trajectory,
}

impl ProtagonistSpec {
    /// Noun phrase such as "red square".
    pub fn phrase(&self) -> String {
        format!("{} {}", self.color, self.shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub style: BackgroundStyle,
    pub color: ColorName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescriptor {
    pub protagonists: Vec<ProtagonistSpec>,
    pub background: BackgroundSpec,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_frames() -> usize {
    DEFAULT_FRAMES
}

fn default_resolution() -> usize {
    DEFAULT_RESOLUTION
}

impl SceneDescriptor {
    /// A red square moving right over a solid green background.
    pub fn default_scene() -> Self {
        Self {
            protagonists: vec![ProtagonistSpec {
                shape: Shape::Square,
                color: ColorName::Red,
                trajectory: Trajectory::Linear {
                    start: [0.3, 0.5],
                    velocity: [0.05, 0.0],
                },
            }],
            background: BackgroundSpec {
                style: BackgroundStyle::Solid,
                color: ColorName::Green,
            },
            frames: DEFAULT_FRAMES,
            resolution: DEFAULT_RESOLUTION,
            seed: 0,
        }
    }

    /// Checks counts, sizes and that every shape stays fully inside the frame.
    pub fn validate(&self) -> Result<()> {
        if self.protagonists.is_empty() || self.protagonists.len() > 2 {
            return Err(Error::Invalid(format!(
                "protagonists: expected 1 or 2, got {}",
                self.protagonists.len()
            )));
        }
        if self.frames == 0 {
            return Err(Error::Invalid("frames: must be at least 1".into()));
        }
        if self.resolution < 8 {
            return Err(Error::Invalid(format!("resolution: {} is below the minimum of 8", self.resolution)));
        }
        for (k, p) in self.protagonists.iter().enumerate() {
            for f in 0..self.frames {
                placement(p.trajectory.position(f), self.resolution).map_err(|e| {
                    Error::Invalid(format!("protagonists[{k}].trajectory: frame {f}: {e}"))
                })?;
            }
        }
        Ok(())
    }
}

/// Side length in pixels of a shape stamp at `resolution`.
pub fn stamp_size(resolution: usize) -> usize {
    ((CANONICAL_SCALE * resolution as f64).round() as usize).max(1)
}

/// Binary `size × size` footprint of a shape.
pub fn stamp(shape: Shape, size: usize) -> Array2<bool> {
    let half = size as f64 / 2.0;
    Array2::from_shape_fn((size, size), |(y, x)| {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match shape {
            Shape::Square => true,
            Shape::Circle => (px - half).powi(2) + (py - half).powi(2) <= half * half,
            // Apex at the top, base along the bottom row.
            Shape::Triangle => (px - half).abs() <= half * py / size as f64,
        }
    })
}

/// Top-left pixel of a stamp whose center sits at normalized `center`.
fn placement(center: [f64; 2], resolution: usize) -> Result<(usize, usize)> {
    let s = stamp_size(resolution) as f64;
    let res = resolution as f64;
    let x0 = (center[0] * res - s / 2.0).round();
    let y0 = (center[1] * res - s / 2.0).round();
    if !(x0.is_finite() && y0.is_finite()) || x0 < 0.0 || y0 < 0.0 || x0 + s > res || y0 + s > res {
        return Err(Error::Invalid(format!(
            "shape centered at ({:.3}, {:.3}) leaves the frame",
            center[0], center[1]
        )));
    }
    Ok((y0 as usize, x0 as usize))
}

/// Background image `[3, res, res]`.
pub fn render_background(bg: BackgroundSpec, resolution: usize) -> Array3<f64> {
    let (a, b) = bg.color.background_tones();
    Array3::from_shape_fn((3, resolution, resolution), |(c, _, x)| match bg.style {
        BackgroundStyle::Solid => a[c],
        BackgroundStyle::Gradient => {
            let s = if resolution > 1 {
                x as f64 / (resolution - 1) as f64
            } else {
                0.0
            };
            a[c] + (b[c] - a[c]) * s
        }
        BackgroundStyle::Stripes => {
            if (x / STRIPE_WIDTH) % 2 == 0 {
                a[c]
            } else {
                b[c]
            }
        }
    })
}

/// A generated clip with one exact mask volume per protagonist.
#[derive(Debug, Clone)]
pub struct Scene {
    pub video: VideoTensor,
    pub masks: Vec<MaskVolume>,
    pub descriptor: SceneDescriptor,
}

/// Renders every frame; later protagonists occlude earlier ones.
pub fn generate_scene(desc: &SceneDescriptor) -> Result<Scene> {
    desc.validate()?;
    let (n, res) = (desc.frames, desc.resolution);
    let size = stamp_size(res);
    let background = render_background(desc.background, res);
    let mut data = Array4::zeros((n, 3, res, res));
    let mut masks = vec![Array3::<f64>::zeros((n, res, res)); desc.protagonists.len()];
    for f in 0..n {
        data.slice_mut(ndarray::s![f, .., .., ..]).assign(&background);
        for (k, p) in desc.protagonists.iter().enumerate() {
            let footprint = stamp(p.shape, size);
            let (y0, x0) = placement(p.trajectory.position(f), res)?;
            let rgb = p.color.rgb();
            for ((dy, dx), &on) in footprint.indexed_iter() {
                if !on {
                    continue;
                }
                let (y, x) = (y0 + dy, x0 + dx);
                for (c, &v) in rgb.iter().enumerate() {
                    data[[f, c, y, x]] = v;
                }
                for earlier in masks.iter_mut().take(k) {
                    earlier[[f, y, x]] = 0.0;
                }
                masks[k][[f, y, x]] = 1.0;
            }
        }
    }
    Ok(Scene {
        video: VideoTensor::new(data)?,
        masks: masks.into_iter().map(MaskVolume::new).collect::<Result<_>>()?,
        descriptor: desc.clone(),
    })
}

/// A single shape centered on mid-gray at canonical scale: `[3, res, res]` plus its mask.
pub fn canonical_render(shape: Shape, color: ColorName, resolution: usize) -> (Array3<f64>, Array2<f64>) {
    let size = stamp_size(resolution);
    let footprint = stamp(shape, size);
    let off = (resolution - size) / 2;
    let rgb = color.rgb();
    let mut image = Array3::zeros((3, resolution, resolution));
    let mut mask = Array2::zeros((resolution, resolution));
    for ((dy, dx), &on) in footprint.indexed_iter() {
        if on {
            for (c, &v) in rgb.iter().enumerate() {
                image[[c, off + dy, off + dx]] = v;
            }
            mask[[off + dy, off + dx]] = 1.0;
        }
    }
    (image, mask)
}

/// Same as [`canonical_render`] but taking vocabulary words.
pub fn canonical_render_words(shape: &str, color: &str, resolution: usize) -> Result<(Array3<f64>, Array2<f64>)> {
    Ok(canonical_render(shape.parse()?, color.parse()?, resolution))
}

/// The six scenes written by the default `synth` configuration.
///
/// Scene 0 is the default single-protagonist clip, scene 4 has two
/// protagonists and scene 3 uses stripes sharing the protagonist hue.
pub fn default_corpus() -> Vec<SceneDescriptor> {
    let linear = |start: [f64; 2], velocity: [f64; 2]| Trajectory::Linear { start, velocity };
    let scene = |protagonists: Vec<ProtagonistSpec>, style, color, seed| SceneDescriptor {
        protagonists,
        background: BackgroundSpec { style, color },
        frames: DEFAULT_FRAMES,
        resolution: DEFAULT_RESOLUTION,
        seed,
    };
    let p = |shape, color, trajectory| ProtagonistSpec {
        shape,
        color,
        trajectory,
    };
    vec![
        SceneDescriptor::default_scene(),
        scene(
            vec![p(Shape::Circle, ColorName::Blue, linear([0.5, 0.3], [0.0, 0.05]))],
            BackgroundStyle::Gradient,
            ColorName::Yellow,
            1,
        ),
        scene(
            vec![p(
                Shape::Triangle,
                ColorName::Green,
                Trajectory::Circular {
                    center: [0.5, 0.5],
                    radius: 0.15,
                    angular_rate: 0.5,
                    phase: 0.0,
                },
            )],
            BackgroundStyle::Stripes,
            ColorName::Magenta,
            2,
        ),
        scene(
            vec![p(Shape::Circle, ColorName::Cyan, linear([0.7, 0.5], [-0.05, 0.0]))],
            BackgroundStyle::Stripes,
            ColorName::Cyan,
            3,
        ),
        scene(
            vec![
                p(Shape::Square, ColorName::Red, linear([0.25, 0.27], [0.05, 0.0])),
                p(Shape::Circle, ColorName::Blue, linear([0.75, 0.73], [-0.05, 0.0])),
            ],
            BackgroundStyle::Solid,
            ColorName::Green,
            4,
        ),
        scene(
            vec![p(Shape::Triangle, ColorName::Magenta, linear([0.5, 0.7], [0.0, -0.04]))],
            BackgroundStyle::Gradient,
            ColorName::Blue,
            5,
        ),
    ]
}
