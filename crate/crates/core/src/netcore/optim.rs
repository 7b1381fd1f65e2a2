//! SGD with momentum and Adam, both with decoupled weight decay, plus the
//! cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::mlp::{ParamKind, ParamTensors};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum {
        momentum: f64,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { momentum }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Apply weight decay to bias vectors as well as weight matrices.
    #[serde(default)]
    pub decay_biases: bool,
}

impl OptimizerConfig {
    pub fn sgd(base_lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::sgd(momentum),
            base_lr,
            weight_decay,
            decay_biases: false,
        }
    }

    pub fn adam(base_lr: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::adam(),
            base_lr,
            weight_decay,
            decay_biases: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {}", self.base_lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!("weight decay {}", self.weight_decay)));
        }
        Ok(())
    }

    fn decays(&self, kind: ParamKind) -> bool {
        match kind {
            ParamKind::Weight => true,
            ParamKind::Bias => self.decay_biases,
            ParamKind::FastWeight | ParamKind::NormScale | ParamKind::NormShift => false,
        }
    }
}

/// Per-parameter optimizer buffers. Buffers are sized on the first step.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr_now`.
    ///
    /// Decay is applied first as `p ← p − lr·wd·p`, then the gradient rule.
    pub fn step<P: ParamTensors>(&mut self, params: &mut P, grad: &P, lr_now: f64) -> Result<()> {
        if !(lr_now >= 0.0) {
            return Err(Error::invalid(format!("learning rate {lr_now}")));
        }
        let grads = grad.tensors();
        let mut tensors = params.tensors_mut();
        if tensors.len() != grads.len() {
            return Err(Error::dims("gradient tensor count", tensors.len(), grads.len()));
        }
        for (i, ((_, p), (_, g))) in tensors.iter().zip(&grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::dims(format!("gradient tensor {i}"), p.len(), g.len()));
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|(_, g)| vec![0.0; g.len()]).collect();
            if matches!(self.config.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        } else if self.first.len() != grads.len()
            || self.first.iter().zip(&grads).any(|(b, (_, g))| b.len() != g.len())
        {
            return Err(Error::invalid("optimizer buffers do not match parameter shapes"));
        }
        self.step += 1;
        let t = self.step as f64;
        let wd = self.config.weight_decay;

        for (i, (kind, p)) in tensors.iter_mut().enumerate() {
            let g = grads[i].1;
            if wd > 0.0 && self.config.decays(*kind) {
                let shrink = 1.0 - lr_now * wd;
                for v in p.iter_mut() {
                    *v *= shrink;
                }
            }
            match self.config.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    let buf = &mut self.first[i];
                    for ((v, b), &gv) in p.iter_mut().zip(buf.iter_mut()).zip(g) {
                        *b = momentum * *b + gv;
                        *v -= lr_now * *b;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powf(t);
                    let c2 = 1.0 - beta2.powf(t);
                    let m = &mut self.first[i];
                    let s = &mut self.second[i];
                    for (((v, mv), sv), &gv) in p.iter_mut().zip(m.iter_mut()).zip(s.iter_mut()).zip(g) {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *sv = beta2 * *sv + (1.0 - beta2) * gv * gv;
                        let mhat = *mv / c1;
                        let shat = *sv / c2;
                        *v -= lr_now * mhat / (shat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Free-function form of [`OptimizerState::step`].
pub fn optimizer_step<P: ParamTensors>(
    state: &mut OptimizerState,
    params: &mut P,
    grad: &P,
    lr_now: f64,
) -> Result<()> {
    state.step(params, grad, lr_now)
}

/// Single-cycle cosine annealing from `base_lr` at step 0 to 0 at `total_steps`.
///
/// Steps past the end clamp to 0.
pub fn cosine_lr(base_lr: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    if step > total_steps {
        log::warn!("cosine schedule step {step} exceeds total {total_steps}; using lr 0");
        return 0.0;
    }
    let frac = step as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{Dense, Matrix, MlpParams};

    fn single(w: f64, b: f64) -> MlpParams {
        MlpParams::new(vec![Dense::new(Matrix::from_vec(1, 1, vec![w]).unwrap(), vec![b]).unwrap()]).unwrap()
    }

    #[test]
    fn vanilla_sgd_moves_by_lr_times_grad() {
        let mut p = single(1.0, 0.5);
        let g = single(0.2, -0.4);
        let mut st = OptimizerState::new(OptimizerConfig::sgd(0.1, 0.0, 0.0)).unwrap();
        st.step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p.to_flat(), vec![1.0 - 0.1 * 0.2, 0.5 + 0.1 * 0.4]);
    }

    #[test]
    fn zero_grad_with_decay_shrinks_weights_only() {
        let mut p = single(2.0, 3.0);
        let g = single(0.0, 0.0);
        let mut st = OptimizerState::new(OptimizerConfig::sgd(0.5, 0.9, 0.1)).unwrap();
        st.step(&mut p, &g, 0.5).unwrap();
        assert_eq!(p.to_flat(), vec![2.0 * (1.0 - 0.5 * 0.1), 3.0]);

        let mut cfg = OptimizerConfig::sgd(0.5, 0.9, 0.1);
        cfg.decay_biases = true;
        let mut p = single(2.0, 3.0);
        let mut st = OptimizerState::new(cfg).unwrap();
        st.step(&mut p, &g, 0.5).unwrap();
        assert_eq!(p.to_flat(), vec![2.0 * 0.95, 3.0 * 0.95]);
    }

    #[test]
    fn adam_matches_hand_rolled_recursion() {
        // Minimize f(w) = (w - 3)^2 with gradient 2(w - 3).
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.05);
        let mut st = OptimizerState::new(OptimizerConfig::adam(lr, 0.0)).unwrap();
        let mut p = single(0.0, 0.0);
        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * (w - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);

            let grad = single(2.0 * (p.layers[0].weight[(0, 0)] - 3.0), 0.0);
            st.step(&mut p, &grad, lr).unwrap();
            assert!((p.layers[0].weight[(0, 0)] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = single(1.5, -0.5);
        let before = p.clone();
        let mut st = OptimizerState::new(OptimizerConfig::adam(0.1, 0.3)).unwrap();
        st.step(&mut p, &single(4.0, 2.0), 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut rng = crate::rng::rng_from_seed(0);
        let mut p = MlpParams::init(&[2, 3], &mut rng).unwrap();
        let g = MlpParams::init(&[2, 4], &mut rng).unwrap();
        let mut st = OptimizerState::new(OptimizerConfig::sgd(0.1, 0.9, 0.0)).unwrap();
        assert!(st.step(&mut p, &g, 0.1).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.3, 0, 100), 0.3);
        assert!(cosine_lr(0.3, 100, 100).abs() < 1e-17);
        assert!((cosine_lr(0.3, 50, 100) - 0.15).abs() < 1e-15);
        assert_eq!(cosine_lr(0.3, 101, 100), 0.0);
        let lrs: Vec<f64> = (0..=37).map(|s| cosine_lr(1.0, s, 37)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
