//! Edge-magnitude control signal standing in for depth or pose maps.

use ndarray::{Array4, ArrayView4};

use crate::error::{Error, Result};
use crate::video::VideoTensor;

/// Frames × 1 × height × width, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVolume {
    data: Array4<f64>,
}

impl ControlVolume {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.shape()[1] != 1 {
            return Err(Error::Shape(format!("control must have one channel, got {:?}", data.shape())));
        }
        Ok(Self {
            data: data.mapv(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }),
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array4::zeros((frames, 1, height, width)),
        }
    }

    pub fn data(&self) -> ArrayView4<'_, f64> {
        self.data.view()
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn ensure_matches(&self, video: &VideoTensor) -> Result<()> {
        let s = self.data.shape();
        if (s[0], s[2], s[3]) != (video.frames(), video.height(), video.width()) {
            return Err(Error::Shape(format!(
                "control {:?} does not match video {:?}",
                s,
                video.shape()
            )));
        }
        Ok(())
    }
}

/// Per-channel Sobel gradients (replicated borders), L2 magnitude across
/// channels, normalized per frame by its maximum.
pub fn sobel_control(video: &VideoTensor) -> ControlVolume {
    let [n, c, h, w] = video.shape();
    let data = video.data();
    let mut out = Array4::zeros((n, 1, h, w));
    let at = |f: usize, ch: usize, y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        data[[f, ch, y, x]]
    };
    for f in 0..n {
        let mut max = 0.0f64;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut sq = 0.0;
                for ch in 0..c {
                    let p = |dy: isize, dx: isize| at(f, ch, y + dy, x + dx);
                    let gx = (p(-1, 1) + 2.0 * p(0, 1) + p(1, 1)) - (p(-1, -1) + 2.0 * p(0, -1) + p(1, -1));
                    let gy = (p(1, -1) + 2.0 * p(1, 0) + p(1, 1)) - (p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1));
                    sq += gx * gx + gy * gy;
                }
                let m = sq.sqrt();
                out[[f, 0, y as usize, x as usize]] = m;
                max = max.max(m);
            }
        }
        if max > 0.0 {
            out.slice_mut(ndarray::s![f, .., .., ..]).mapv_inplace(|v| v / max);
        }
    }
    ControlVolume { data: out }
}
