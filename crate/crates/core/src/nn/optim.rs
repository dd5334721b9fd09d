use serde::{Deserialize, Serialize};

use super::Module;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Serializable moment buffers, one pair per parameter tensor in module order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig, module: &impl Module) -> Self {
        let sizes: Vec<usize> = module.params().iter().map(|(_, p)| p.len()).collect();
        Adam {
            config,
            state: AdamState {
                step: 0,
                first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
                second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            },
        }
    }

    pub fn restore(&mut self, state: AdamState) -> Result<()> {
        let ok = state.first.len() == self.state.first.len()
            && state.first.iter().zip(&self.state.first).all(|(a, b)| a.len() == b.len())
            && state.second.len() == state.first.len();
        if !ok {
            return Err(Error::Checkpoint("optimizer state does not match network".into()));
        }
        self.state = state;
        Ok(())
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, module: &mut impl Module) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let step_size = lr / c1;
        let c2_sqrt = c2.sqrt();
        for (i, (_, p)) in module.params_mut().into_iter().enumerate() {
            let m = &mut self.state.first[i];
            let v = &mut self.state.second[i];
            for (((w, g), mi), vi) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                *w -= step_size * *mi / (vi.sqrt() / c2_sqrt + eps);
            }
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, Param};

    struct Quad(Param);

    impl Module for Quad {
        fn params(&self) -> Vec<(String, &Param)> {
            vec![("w".into(), &self.0)]
        }
        fn params_mut(&mut self) -> Vec<(String, &mut Param)> {
            vec![("w".into(), &mut self.0)]
        }
    }

    #[test]
    fn first_step_moves_each_weight_by_learning_rate() {
        let mut q = Quad(Param::new(vec![2], vec![1.0, -1.0]));
        let mut opt = Adam::new(AdamConfig::default(), &q);
        q.0.grad = vec![3.0, -0.5];
        opt.step(&mut q);
        assert!((q.0.value[0] - (1.0 - 2e-4)).abs() < 1e-7);
        assert!((q.0.value[1] - (-1.0 + 2e-4)).abs() < 1e-7);
        assert_eq!(q.0.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut q = Quad(Param::new(vec![1], vec![5.0]));
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut opt = Adam::new(cfg, &q);
        for _ in 0..500 {
            q.0.grad = vec![2.0 * (q.0.value[0] - 2.0)];
            opt.step(&mut q);
        }
        assert!((q.0.value[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn restore_rejects_foreign_state() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let l = crate::nn::Sequential::new(vec![crate::nn::Layer::Linear(Linear::new(3, 2, &mut rng))]);
        let mut opt = Adam::new(AdamConfig::default(), &l);
        assert!(opt.restore(AdamState::default()).is_err());
    }
}
