//! Adam with three learning-rate roles (pose, MLPs, point features) and an
//! exponential decay schedule that applies to the feature role only.

use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use crate::decoders::{DecoderSet, ShapeMismatch};
use crate::nn::MlpGrad;
use crate::point_map::{NeuralPointCloud, FEATURE_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrRole {
    Pose,
    Mlp,
    Feature,
}

/// Optimizer hyperparameters. The feature learning rate decays as
/// `lr * 0.1^(iter / 10000)` with `iter` reset at each mapping phase;
/// pose and MLP rates stay constant.
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr_pose: f64,
    pub lr_mlp: f64,
    pub lr_feature: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub feature_decay_base: f64,
    pub feature_decay_steps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr_pose: 0.0015,
            lr_mlp: 0.003,
            lr_feature: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            feature_decay_base: 0.1,
            feature_decay_steps: 10000.0,
        }
    }
}

impl AdamParams {
    /// Effective learning rate of a role at the given mapping-phase
    /// iteration.
    pub fn effective_lr(&self, role: LrRole, iter: u64) -> f64 {
        match role {
            LrRole::Pose => self.lr_pose,
            LrRole::Mlp => self.lr_mlp,
            LrRole::Feature => {
                self.lr_feature
                    * Float::powf(self.feature_decay_base, iter as f64 / self.feature_decay_steps)
            }
        }
    }
}

/// First/second moment buffers plus the bias-correction step counter for
/// one flat parameter block.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    fn advance(&mut self, params: &AdamParams) -> (f64, f64) {
        self.step += 1;
        let t = self.step as i32;
        (1.0 - params.beta1.powi(t), 1.0 - params.beta2.powi(t))
    }

    /// One Adam update over f64 parameters.
    pub fn step_f64(
        &mut self,
        values: &mut [f64],
        grads: &[f64],
        lr: f64,
        params: &AdamParams,
    ) -> Result<(), ShapeMismatch> {
        if values.len() != grads.len() || values.len() != self.m.len() {
            return Err(ShapeMismatch);
        }
        let (bc1, bc2) = self.advance(params);
        for i in 0..values.len() {
            let g = grads[i];
            self.m[i] = params.beta1 * self.m[i] + (1.0 - params.beta1) * g;
            self.v[i] = params.beta2 * self.v[i] + (1.0 - params.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            values[i] -= lr * mh / (vh.sqrt() + params.eps);
        }
        Ok(())
    }

    /// One Adam update over f32-stored parameters (arithmetic in f64).
    pub fn step_f32(
        &mut self,
        values: &mut [f32],
        grads: &[f64],
        lr: f64,
        params: &AdamParams,
    ) -> Result<(), ShapeMismatch> {
        if values.len() != grads.len() || values.len() != self.m.len() {
            return Err(ShapeMismatch);
        }
        let (bc1, bc2) = self.advance(params);
        for i in 0..values.len() {
            let g = grads[i];
            self.m[i] = params.beta1 * self.m[i] + (1.0 - params.beta1) * g;
            self.v[i] = params.beta2 * self.v[i] + (1.0 - params.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            values[i] = ((values[i] as f64) - lr * mh / (vh.sqrt() + params.eps)) as f32;
        }
        Ok(())
    }
}

/// Adam states for every tensor of a decoder set, in flat tensor order.
#[derive(Clone, Debug)]
pub struct DecoderAdam {
    states: Vec<AdamState>,
}

impl DecoderAdam {
    pub fn new(set: &DecoderSet) -> Self {
        DecoderAdam { states: set.tensors().iter().map(|t| AdamState::new(t.len())).collect() }
    }

    /// Applies accumulated decoder gradients with the MLP learning rate.
    pub fn step(
        &mut self,
        set: &mut DecoderSet,
        grads: &[&MlpGrad; 3],
        params: &AdamParams,
    ) -> Result<(), ShapeMismatch> {
        let lr = params.effective_lr(LrRole::Mlp, 0);
        let mut flat: Vec<&[f64]> = Vec::new();
        for g in grads {
            for layer in &g.layers {
                flat.push(&layer.w);
                flat.push(&layer.b);
            }
        }
        let tensors = set.tensors_mut();
        if tensors.len() != flat.len() || tensors.len() != self.states.len() {
            return Err(ShapeMismatch);
        }
        for ((tensor, grad), state) in tensors.into_iter().zip(flat).zip(self.states.iter_mut()) {
            state.step_f32(tensor, grad, lr, params)?;
        }
        Ok(())
    }
}

/// Dense Adam update of every point feature. Moments live inside the
/// points so map filtering and fusion keep them aligned; `step` is the
/// shared bias-correction counter.
pub fn feature_adam_step(
    map: &mut NeuralPointCloud,
    grads: &[[f64; FEATURE_DIM]],
    lr: f64,
    step: u64,
    params: &AdamParams,
) {
    debug_assert_eq!(grads.len(), map.len());
    let bc1 = 1.0 - params.beta1.powi(step.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - params.beta2.powi(step.min(i32::MAX as u64) as i32);
    for (i, g) in grads.iter().enumerate() {
        let pt = map.point_mut(i as u32);
        for d in 0..FEATURE_DIM {
            let gr = g[d];
            pt.moments.m[d] = params.beta1 * pt.moments.m[d] + (1.0 - params.beta1) * gr;
            pt.moments.v[d] = params.beta2 * pt.moments.v[d] + (1.0 - params.beta2) * gr * gr;
            let mh = pt.moments.m[d] / bc1;
            let vh = pt.moments.v[d] / bc2;
            pt.feature[d] -= lr * mh / (vh.sqrt() + params.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut st = AdamState::new(3);
        let mut values = [1.0f64, -2.0, 0.5];
        st.step_f64(&mut values, &[0.0, 0.0, 0.0], 0.01, &AdamParams::default()).unwrap();
        assert_eq!(values, [1.0, -2.0, 0.5]);
    }

    #[test]
    fn feature_lr_decays_by_schedule() {
        let p = AdamParams::default();
        assert!((p.effective_lr(LrRole::Feature, 0) - 0.005).abs() < 1e-15);
        assert!((p.effective_lr(LrRole::Feature, 10000) - 0.0005).abs() < 1e-12);
        assert!((p.effective_lr(LrRole::Pose, 10000) - 0.0015).abs() < 1e-15);
        assert!((p.effective_lr(LrRole::Mlp, 10000) - 0.003).abs() < 1e-15);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // f(x) = x^2 at x = 1: grad = 2
        let p = AdamParams::default();
        let mut st = AdamState::new(1);
        let mut x = [1.0f64];
        let lr = 0.1;
        st.step_f64(&mut x, &[2.0], lr, &p).unwrap();
        let m = 0.1 * 2.0;
        let v = 0.001 * 4.0;
        let mh = m / (1.0 - 0.9);
        let vh = v / (1.0 - 0.999);
        let expect = 1.0 - lr * mh / (vh.sqrt() + p.eps);
        assert!((x[0] - expect).abs() < 1e-15, "{} vs {expect}", x[0]);
    }

    #[test]
    fn shape_mismatch_detected() {
        let mut st = AdamState::new(2);
        let mut values = [0.0f64; 3];
        assert!(st.step_f64(&mut values, &[0.0; 3], 0.1, &AdamParams::default()).is_err());
    }

    #[test]
    fn descends_a_quadratic() {
        let p = AdamParams::default();
        let mut st = AdamState::new(1);
        let mut x = [3.0f64];
        for _ in 0..4000 {
            let g = 2.0 * x[0];
            st.step_f64(&mut x, &[g], 0.01, &p).unwrap();
        }
        assert!(x[0].abs() < 1e-2, "x = {}", x[0]);
    }
}
