//! AdamW with decoupled weight decay and the warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::array::Array;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.02 }
    }
}

/// Moment estimates for one parameter list.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Array>,
    v: Vec<Array>,
    t: u64,
}

impl AdamW {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Array>) -> Self {
        let (m, v) = params.into_iter().map(|p| (Array::zeros(p.shape()), Array::zeros(p.shape()))).unzip();
        Self { config, m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update of every parameter with learning rate `lr`.
    ///
    /// `m ← β1·m + (1−β1)·g`, `v ← β2·v + (1−β2)·g²`, bias-corrected, then
    /// `θ ← θ − lr·m̂/(√v̂+ε) − lr·wd·θ`.
    pub fn step(&mut self, params: &mut [&mut Array], grads: &[&Array], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(Error::shape(format!(
                    "parameter {i}: state {:?}, param {:?}, grad {:?}",
                    self.m[i].shape(),
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.t += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, gd) = (p.data_mut(), g.data());
            for ((th, &gk), (mk, vk)) in pd.iter_mut().zip(gd).zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut())) {
                *mk = beta1 * *mk + (1.0 - beta1) * gk;
                *vk = beta2 * *vk + (1.0 - beta2) * gk * gk;
                let m_hat = *mk / bc1;
                let v_hat = *vk / bc2;
                *th = *th - lr * m_hat / (v_hat.sqrt() + eps) - lr * weight_decay * *th;
            }
        }
        Ok(())
    }
}

/// Linear warmup then half-cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_epochs: usize,
    pub cosine_epochs: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { warmup_epochs: 5, cosine_epochs: 50 }
    }
}

impl LrSchedule {
    /// Learning rate for a (possibly negative, hence `i64`) epoch index.
    pub fn lr(&self, epoch: i64, base_lr: f64) -> Result<f64> {
        if epoch < 0 {
            return Err(Error::contract(format!("negative epoch {epoch}")));
        }
        let e = epoch as usize;
        let w = self.warmup_epochs;
        Ok(if e < w {
            base_lr * (e + 1) as f64 / w as f64
        } else if e <= w + self.cosine_epochs {
            let progress = (e - w) as f64 / self.cosine_epochs as f64;
            base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        } else {
            0.0
        })
    }

    /// Epochs after which the schedule has reached zero.
    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.cosine_epochs
    }
}

/// `lr_schedule` with the default 5-epoch warmup and 50-epoch cosine decay.
pub fn lr_schedule(epoch: i64, base_lr: f64) -> Result<f64> {
    LrSchedule::default().lr(epoch, base_lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(cfg: AdamWConfig, theta: f64, g: f64, lr: f64) -> f64 {
        let mut p = Array::vector(vec![theta]);
        let grad = Array::vector(vec![g]);
        let mut opt = AdamW::new(cfg, [&p]);
        opt.step(&mut [&mut p], &[&grad], lr).unwrap();
        p.data()[0]
    }

    #[test]
    fn decay_only_step() {
        let cfg = AdamWConfig { weight_decay: 0.02, ..Default::default() };
        let th = one_step(cfg, 1.0, 0.0, 0.001);
        assert!((th - 0.99998).abs() < 1e-15, "{th}");
    }

    #[test]
    fn plain_step_without_momentum() {
        let cfg = AdamWConfig { beta1: 0.0, beta2: 0.0, eps: 1e-8, weight_decay: 0.0 };
        // m̂ = 1, v̂ = 1 → Δθ = −0.1 / (1 + 1e-8)
        let th = one_step(cfg, 0.0, 1.0, 0.1);
        assert!((th + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((th + 0.1).abs() < 1e-8);
    }

    #[test]
    fn bias_corrected_first_step() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let lr = 0.01;
        // m = 0.2, v = 0.004 → m̂ = 2, v̂ = 4
        let th = one_step(cfg, 0.0, 2.0, lr);
        assert!((th + lr * 2.0 / (2.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        assert_eq!(one_step(cfg, 0.731, 0.0, 0.5), 0.731);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = Array::vector(vec![1.0, 2.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), [&p]);
        let mut q = Array::vector(vec![1.0]);
        assert!(opt.step(&mut [&mut q], &[&Array::vector(vec![0.0])], 0.1).is_err());
    }

    #[test]
    fn schedule_landmarks() {
        let base = 0.001;
        assert_eq!(lr_schedule(0, base).unwrap(), base / 5.0);
        assert_eq!(lr_schedule(4, base).unwrap(), base);
        assert_eq!(lr_schedule(5, base).unwrap(), base);
        assert!((lr_schedule(30, base).unwrap() - 0.5 * base).abs() < 1e-18);
        assert!(lr_schedule(55, base).unwrap().abs() < 1e-18);
        assert_eq!(lr_schedule(56, base).unwrap(), 0.0);
        assert!(lr_schedule(-1, base).is_err());
    }

    proptest::proptest! {
        #[test]
        fn schedule_stays_within_base(warmup in 1usize..10, cosine in 1usize..80, epoch in 0i64..200, base in 1e-5f64..1.0) {
            let s = LrSchedule { warmup_epochs: warmup, cosine_epochs: cosine };
            let lr = s.lr(epoch, base).unwrap();
            proptest::prop_assert!((0.0..=base * (1.0 + 1e-12)).contains(&lr));
            if epoch as usize > s.total_epochs() {
                proptest::prop_assert_eq!(lr, 0.0);
            }
        }
    }
}
