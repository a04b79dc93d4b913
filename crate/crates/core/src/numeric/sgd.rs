use serde::{Deserialize, Serialize};

use super::model::{EmbeddingModel, Gradients};
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum, L2 weight decay and a step schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (0-based) at which the learning rate is divided by `lr_drop_factor`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_drop_epochs: vec![15, 25],
            lr_drop_factor: 10.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let field = |name: &str| format!("{prefix}{name}");
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(
                field("learning_rate"),
                format!("must be positive, got {}", self.learning_rate),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(
                field("momentum"),
                format!("must be in [0, 1), got {}", self.momentum),
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(
                field("weight_decay"),
                format!("must be non-negative, got {}", self.weight_decay),
            ));
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(
                field("lr_drop_epochs"),
                "must be strictly increasing",
            ));
        }
        if !(self.lr_drop_factor.is_finite() && self.lr_drop_factor > 0.0) {
            return Err(Error::config(
                field("lr_drop_factor"),
                format!("must be positive, got {}", self.lr_drop_factor),
            ));
        }
        Ok(())
    }

    /// Effective learning rate during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
        self.learning_rate / self.lr_drop_factor.powi(drops as i32)
    }
}

/// Momentum buffers, one per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub buffers: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn for_blocks(sizes: impl IntoIterator<Item = usize>) -> Self {
        Self {
            buffers: sizes.into_iter().map(|n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_model(model: &EmbeddingModel) -> Self {
        Self::for_blocks(model.param_blocks().iter().map(|b| b.len()))
    }

    /// One update over matching parameter and gradient blocks:
    /// `g' = g + wd·p`, `buf = μ·buf + g'`, `p -= lr(epoch)·buf`.
    pub fn step(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
        config: &SgdConfig,
        epoch: usize,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.buffers.len() {
            return Err(Error::Dimension(format!(
                "sgd: {} parameter blocks, {} gradient blocks, {} buffers",
                params.len(),
                grads.len(),
                self.buffers.len()
            )));
        }
        for (i, ((p, g), buf)) in params.iter().zip(grads).zip(&self.buffers).enumerate() {
            if p.len() != g.len() || p.len() != buf.len() {
                return Err(Error::Dimension(format!(
                    "sgd: block {i} sizes differ (param {}, grad {}, buffer {})",
                    p.len(),
                    g.len(),
                    buf.len()
                )));
            }
        }
        let lr = config.lr_at(epoch);
        for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut self.buffers) {
            for ((pj, gj), bj) in p.iter_mut().zip(g.iter()).zip(buf.iter_mut()) {
                let d = gj + config.weight_decay * *pj;
                *bj = config.momentum * *bj + d;
                *pj -= lr * *bj;
            }
        }
        Ok(())
    }

    pub fn step_model(
        &mut self,
        model: &mut EmbeddingModel,
        grads: &Gradients,
        config: &SgdConfig,
        epoch: usize,
    ) -> Result<()> {
        let g = grads.blocks();
        let mut p = model.param_blocks_mut();
        self.step(&mut p, &g, config, epoch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(lr: f64) -> SgdConfig {
        SgdConfig {
            learning_rate: lr,
            momentum: 0.0,
            weight_decay: 0.0,
            lr_drop_epochs: vec![],
            lr_drop_factor: 10.0,
        }
    }

    #[test]
    fn plain_step() {
        let mut p = vec![1.0];
        let mut st = SgdState::for_blocks([1]);
        st.step(&mut [&mut p], &[&[1.0]], &plain(0.1), 0).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn schedule_drops() {
        let cfg = SgdConfig {
            lr_drop_epochs: vec![2],
            ..plain(0.1)
        };
        assert_eq!(cfg.lr_at(1), 0.1);
        assert!((cfg.lr_at(2) - 0.01).abs() < 1e-18);
        assert!((cfg.lr_at(9) - 0.01).abs() < 1e-18);
    }

    #[test]
    fn momentum_two_step_unrolled() {
        // step 1: buf = 1, p = -lr; step 2: buf = 0.9 + 1 = 1.9, p = -lr - 1.9 lr
        let cfg = SgdConfig {
            momentum: 0.9,
            ..plain(0.1)
        };
        let mut p = vec![0.0];
        let mut st = SgdState::for_blocks([1]);
        st.step(&mut [&mut p], &[&[1.0]], &cfg, 0).unwrap();
        let after_one = p[0];
        st.step(&mut [&mut p], &[&[1.0]], &cfg, 0).unwrap();
        assert!((st.buffers[0][0] - 1.9).abs() < 1e-15);
        assert!(((after_one - p[0]) - 0.19).abs() < 1e-15);
    }

    #[test]
    fn decreases_convex_quadratic() {
        // L = ½ Σ a_i p_i²
        let a = [1.0, 3.0, 0.5];
        let mut p = vec![2.0, -1.0, 4.0];
        let loss = |p: &[f64]| 0.5 * p.iter().zip(&a).map(|(x, k)| k * x * x).sum::<f64>();
        let mut st = SgdState::for_blocks([3]);
        let mut prev = loss(&p);
        for _ in 0..50 {
            let g: Vec<f64> = p.iter().zip(&a).map(|(x, k)| k * x).collect();
            st.step(&mut [&mut p], &[&g], &plain(0.1), 0).unwrap();
            let now = loss(&p);
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn validation_names_fields() {
        let cfg = SgdConfig {
            lr_drop_epochs: vec![5, 5],
            ..Default::default()
        };
        let err = cfg.validate("sgd.").unwrap_err();
        assert!(err.to_string().contains("sgd.lr_drop_epochs"));
        let cfg = SgdConfig {
            momentum: 1.0,
            ..SgdConfig::default()
        };
        assert!(cfg.validate("sgd.").is_err());
    }

    #[test]
    fn shape_mismatch() {
        let mut st = SgdState::for_blocks([2]);
        let mut p = vec![0.0; 2];
        assert!(st.step(&mut [&mut p], &[&[1.0]], &plain(0.1), 0).is_err());
    }
}
