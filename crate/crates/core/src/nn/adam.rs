//! Adam with optional global-norm gradient clipping.

use super::params::ParamSet;
use super::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            m: params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect(),
            v: params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect(),
        }
    }

    pub fn with_clip_norm(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Returns the global gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Tensor<T>]) -> f64 {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        let norm = grads
            .iter()
            .flat_map(|g| g.data.iter())
            .map(|v| {
                let v = v.to_f64().unwrap();
                v * v
            })
            .sum::<f64>()
            .sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (ob1, ob2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(self.lr / bc1);
        let rbc2 = T::of(1.0 / bc2.sqrt());
        let eps = T::of(self.eps);
        let scale = T::of(scale);
        for (i, g) in grads.iter().enumerate() {
            let p = &mut params.value_mut(i).data;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g.data[j] * scale;
                m[j] = b1 * m[j] + ob1 * gj;
                v[j] = b2 * v[j] + ob2 * gj * gj;
                p[j] -= step_size * m[j] / (v[j].sqrt() * rbc2 + eps);
            }
        }
        norm
    }
}
