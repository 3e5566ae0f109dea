//! SGD with classic momentum, inverse-time learning-rate decay, and a
//! coupled L2 regularizer.
//!
//! Update, per parameter array:
//!   effective_lr = lr / (1 + decay * step)
//!   g' = g + l2 * theta
//!   velocity = momentum * velocity - effective_lr * g'
//!   theta += velocity

use crate::error::{Error, Result};
use crate::model::{ModelGrads, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
    pub decay: f64,
    pub l2: f64,
}

impl Default for SgdHyper {
    fn default() -> Self {
        Self {
            lr: 0.0003,
            momentum: 0.9,
            decay: 0.0001,
            l2: 0.0005,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub hyper: SgdHyper,
    pub velocity: ModelParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(hyper: SgdHyper, params: &ModelParams) -> Self {
        Self {
            hyper,
            velocity: params.zeros_like(),
            step: 0,
        }
    }
}

/// One SGD step. Rejects non-finite gradients, naming the offending array.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &ModelGrads,
    state: &mut OptimizerState,
) -> Result<()> {
    for (name, _, values) in grads.named_arrays() {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                name,
                step: state.step,
            });
        }
    }
    let h = state.hyper;
    let effective_lr = h.lr / (1.0 + h.decay * state.step as f64);

    let grad_arrays = grads.named_arrays();
    let param_snapshot = params.named_arrays();
    let mut idx = 0;
    state.velocity.for_each_array_mut(|name, velocity| {
        debug_assert_eq!(name, grad_arrays[idx].0);
        let g = &grad_arrays[idx].2;
        let theta = &param_snapshot[idx].2;
        for (k, v) in velocity.enumerate() {
            let adjusted = g[k] + h.l2 * theta[k];
            *v = h.momentum * *v - effective_lr * adjusted;
        }
        idx += 1;
    });
    params.add_scaled(&state.velocity, 1.0);
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n: 2,
            c: 2,
            d: 2,
            r: 1,
            t: 1,
            h: 2,
            w: 2,
            hidden1: 2,
            hidden2: 2,
            no_graph: false,
            no_global_descriptor: false,
            no_self_attention: false,
        }
    }

    fn hyper(lr: f64, momentum: f64, decay: f64, l2: f64) -> SgdHyper {
        SgdHyper {
            lr,
            momentum,
            decay,
            l2,
        }
    }

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let cfg = tiny_config();
        let mut params = ModelParams::init(&cfg, 0);
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = OptimizerState::new(hyper(0.1, 0.9, 0.0, 0.0), &params);
        sgd_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn plain_sgd_arithmetic() {
        // scalar theta = 1, g = 2, lr = 0.1 -> theta = 0.8
        let cfg = tiny_config();
        let mut params = ModelParams::zeros(&cfg);
        params.mlp.b3[0] = 1.0;
        let mut grads = params.zeros_like();
        grads.mlp.b3[0] = 2.0;
        let mut state = OptimizerState::new(hyper(0.1, 0.0, 0.0, 0.0), &params);
        sgd_step(&mut params, &grads, &mut state).unwrap();
        assert!((params.mlp.b3[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_matches_unrolled_recurrence() {
        let cfg = tiny_config();
        let mut params = ModelParams::zeros(&cfg);
        params.mlp.b3[0] = 1.0;
        let mut grads = params.zeros_like();
        grads.mlp.b3[0] = 0.5;
        let h = hyper(0.1, 0.9, 0.0, 0.0);
        let mut state = OptimizerState::new(h, &params);
        sgd_step(&mut params, &grads, &mut state).unwrap();
        sgd_step(&mut params, &grads, &mut state).unwrap();
        // v1 = -lr*g; theta1 = 1 + v1; v2 = m*v1 - lr*g; theta2 = theta1 + v2
        let v1 = -h.lr * 0.5;
        let theta1 = 1.0 + v1;
        let v2 = h.momentum * v1 - h.lr * 0.5;
        let theta2 = theta1 + v2;
        assert_eq!(params.mlp.b3[0], theta2);
    }

    #[test]
    fn decay_reduces_effective_lr() {
        let cfg = tiny_config();
        let mut params = ModelParams::zeros(&cfg);
        params.mlp.b3[0] = 0.0;
        let mut grads = params.zeros_like();
        grads.mlp.b3[0] = 1.0;
        let h = hyper(0.1, 0.0, 0.5, 0.0);
        let mut state = OptimizerState::new(h, &params);
        sgd_step(&mut params, &grads, &mut state).unwrap();
        // step 0: effective lr = 0.1
        assert!((params.mlp.b3[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut params, &grads, &mut state).unwrap();
        // step 1: effective lr = 0.1 / 1.5
        assert!((params.mlp.b3[0] + 0.1 + 0.1 / 1.5).abs() < 1e-15);
    }

    #[test]
    fn velocity_invariant_without_momentum() {
        let cfg = tiny_config();
        let mut params = ModelParams::init(&cfg, 1);
        let reference = params.clone();
        let mut grads = params.zeros_like();
        grads.edge.gamma[(0, 0)] = 0.7;
        let h = hyper(0.05, 0.0, 0.0, 0.01);
        let mut state = OptimizerState::new(h, &params);
        sgd_step(&mut params, &grads, &mut state).unwrap();
        // theta <- theta - lr*(g + l2*theta) exactly
        for ((_, _, got), ((_, _, theta), (_, _, g))) in params
            .named_arrays()
            .iter()
            .zip(reference.named_arrays().iter().zip(grads.named_arrays().iter()))
        {
            for k in 0..got.len() {
                let expect = theta[k] - h.lr * (g[k] + h.l2 * theta[k]);
                assert_eq!(got[k], expect);
            }
        }
    }

    #[test]
    fn l2_shrinks_norm_with_zero_data_gradient() {
        let cfg = tiny_config();
        let mut params = ModelParams::init(&cfg, 2);
        let grads = params.zeros_like();
        let mut state = OptimizerState::new(hyper(0.1, 0.9, 0.0, 0.1), &params);
        let norm = |p: &ModelParams| -> f64 {
            p.named_arrays()
                .iter()
                .flat_map(|(_, _, v)| v.clone())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
        };
        let mut prev = norm(&params);
        for _ in 0..10 {
            sgd_step(&mut params, &grads, &mut state).unwrap();
            let next = norm(&params);
            assert!(next < prev);
            prev = next;
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_by_name() {
        let cfg = tiny_config();
        let mut params = ModelParams::init(&cfg, 3);
        let mut grads = params.zeros_like();
        grads.gcn.layers[1][(0, 1)] = f64::NAN;
        let mut state = OptimizerState::new(SgdHyper::default(), &params);
        match sgd_step(&mut params, &grads, &mut state) {
            Err(Error::NonFiniteGradient { name, .. }) => assert_eq!(name, "gcn.w2"),
            other => panic!("expected NonFiniteGradient, got {:?}", other.err()),
        }
    }
}
