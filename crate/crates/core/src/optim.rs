//! Plain gradient steps and Adam.

use crate::autodiff::{GradMap, ValueMap};
use crate::tensor::Tensor;

/// `params -= lr * grads`, for every array that has a gradient.
pub fn sgd_step(params: &mut ValueMap, grads: &GradMap, lr: f64) {
    for (name, g) in grads {
        if let Some(p) = params.get_mut(name) {
            p.axpy(-lr, g);
        }
    }
}

/// Quadratic pull `½ Σ weight·φ (θ − θ*)²` handled as an exact proximal
/// step after each Adam update, using Adam's per-coordinate step size.
#[derive(Clone, Copy, Debug)]
pub struct Proximal<'a> {
    pub phi: &'a ValueMap,
    pub anchor: &'a ValueMap,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: ValueMap,
    v: ValueMap,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: ValueMap::new(),
            v: ValueMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ValueMap, grads: &GradMap) {
        self.step_with(params, grads, None);
    }

    /// Adam update; with `prox`, each coordinate is then moved to
    /// `(θ̃ + η φ θ*) / (1 + η φ)` where `η` is that coordinate's effective
    /// Adam step. Arrays without a gradient still receive the pull.
    pub fn step_with(
        &mut self,
        params: &mut ValueMap,
        grads: &GradMap,
        prox: Option<Proximal<'_>>,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let shape = p.shape();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(shape[0], shape[1]));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(shape[0], shape[1]));
            let g = grads.get(name);
            let pull =
                prox.and_then(|px| Some((px.phi.get(name)?, px.anchor.get(name)?, px.weight)));
            if g.is_none() && pull.is_none() {
                continue;
            }
            for k in 0..p.len() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                let mk = self.beta1 * m.data()[k] + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v.data()[k] + (1.0 - self.beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let eta = self.lr / ((vk / bc2).sqrt() + self.eps);
                let mut theta = p.data()[k] - eta * (mk / bc1);
                if let Some((phi, anchor, w)) = pull {
                    let c = eta * w * phi.data()[k];
                    theta = (theta + c * anchor.data()[k]) / (1.0 + c);
                }
                p.data_mut()[k] = theta;
            }
        }
    }
}
