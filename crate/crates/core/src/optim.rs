//! AdamW with decoupled weight decay and a cosine-annealed learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::invalid("AdamW betas must lie in (0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("AdamW needs eps > 0 and weight_decay >= 0"));
        }
        Ok(())
    }
}

/// Per-parameter first and second moments, aligned with the parameter list
/// passed to every [`AdamW::step`]. Frozen parameters keep an empty slot.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    shapes: Vec<Vec<usize>>,
    precision: Precision,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamW {
            config,
            step: 0,
            moments: Vec::new(),
            shapes: Vec::new(),
            precision: Precision::F64,
        })
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable tensor in `params` using its `grad`.
    ///
    /// `m <- b1 m + (1 - b1) g`, `v <- b2 v + (1 - b2) g^2`, then
    /// `theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd theta)`.
    pub fn step(&mut self, params: &mut [&mut Tensor], lr: f64) -> Result<()> {
        if self.shapes.is_empty() && self.step == 0 {
            self.shapes = params.iter().map(|p| p.shape().to_vec()).collect();
            self.moments = vec![None; params.len()];
        }
        if params.len() != self.shapes.len()
            || params
                .iter()
                .zip(&self.shapes)
                .any(|(p, s)| p.shape() != s.as_slice())
        {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: self.shapes.iter().map(|s| s.iter().product()).collect(),
                rhs: params.iter().map(|p| p.numel()).collect(),
            });
        }
        for (i, p) in params.iter().enumerate() {
            if p.requires_grad() && p.grad().is_none() {
                return Err(Error::invalid(format!(
                    "trainable parameter #{i} has no gradient"
                )));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (p, slot) in params.iter_mut().zip(self.moments.iter_mut()) {
            if !p.requires_grad() {
                continue;
            }
            let n = p.numel();
            let (m, v) = slot.get_or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let g = p.grad().expect("checked above").to_vec();
            let precision = self.precision;
            let theta = p.data_mut();
            for j in 0..n {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                let update = m_hat / (v_hat.sqrt() + eps) + weight_decay * theta[j];
                theta[j] = precision.round(theta[j] - lr * update);
            }
        }
        Ok(())
    }
}

/// `lr(t) = eta_min + (lr_max - eta_min) (1 + cos(pi t / T)) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub eta_min: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(lr_max: f64, eta_min: f64, total_steps: usize) -> Result<Self> {
        if !(lr_max > 0.0) || !(eta_min >= 0.0) || eta_min > lr_max || total_steps == 0 {
            return Err(Error::invalid(format!(
                "cosine schedule needs lr_max > 0, 0 <= eta_min <= lr_max, total_steps > 0 \
                 (got {lr_max}, {eta_min}, {total_steps})"
            )));
        }
        Ok(CosineSchedule {
            lr_max,
            eta_min,
            total_steps,
        })
    }

    pub fn lr(&self, t: usize) -> Result<f64> {
        if t > self.total_steps {
            return Err(Error::invalid(format!(
                "schedule step {t} beyond total {}",
                self.total_steps
            )));
        }
        if t == 0 {
            return Ok(self.lr_max);
        }
        if t == self.total_steps {
            return Ok(self.eta_min);
        }
        let phase = std::f64::consts::PI * t as f64 / self.total_steps as f64;
        Ok(self.eta_min + 0.5 * (self.lr_max - self.eta_min) * (1.0 + phase.cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn no_decay() -> AdamWConfig {
        AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::zeros(&[1]).with_requires_grad(true);
        p.accumulate_grad(&[1.0]).unwrap();
        let mut opt = AdamW::new(no_decay()).unwrap();
        opt.step(&mut [&mut p], 1e-4).unwrap();
        // m_hat = v_hat = 1, so theta = -lr / (1 + eps)
        assert!((p.data()[0] - (-9.99999995e-5)).abs() < 1e-12);
        assert_eq!(p.data()[0], -1e-4 / (1.0 + 1e-8));
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut p = Tensor::from_vec(vec![0.7, -2.0]).with_requires_grad(true);
        p.accumulate_grad(&[0.0, 0.0]).unwrap();
        let before = p.data().to_vec();
        let mut opt = AdamW::new(no_decay()).unwrap();
        opt.step(&mut [&mut p], 1e-3).unwrap();
        assert_eq!(p.data(), &before[..]);
    }

    #[test]
    fn decay_shrinks_geometrically() {
        let mut p = Tensor::from_vec(vec![0.7, -2.0]).with_requires_grad(true);
        p.accumulate_grad(&[0.0, 0.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.1,
            ..Default::default()
        })
        .unwrap();
        let lr = 1e-2;
        opt.step(&mut [&mut p], lr).unwrap();
        for (a, b) in p.data().iter().zip([0.7, -2.0]) {
            assert!((a - b * (1.0 - lr * 0.1)).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_params_untouched() {
        let mut frozen = Tensor::from_vec(vec![1.0, 2.0]);
        let mut live = Tensor::from_vec(vec![1.0]).with_requires_grad(true);
        live.accumulate_grad(&[0.5]).unwrap();
        let sum = frozen.checksum();
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        for _ in 0..3 {
            opt.step(&mut [&mut frozen, &mut live], 1e-2).unwrap();
        }
        assert_eq!(frozen.checksum(), sum);
        assert_ne!(live.data()[0], 1.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut a = Tensor::zeros(&[2]).with_requires_grad(true);
        a.accumulate_grad(&[0.0, 0.0]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        opt.step(&mut [&mut a], 1e-3).unwrap();
        let mut b = Tensor::zeros(&[3]).with_requires_grad(true);
        b.accumulate_grad(&[0.0; 3]).unwrap();
        assert!(opt.step(&mut [&mut b], 1e-3).is_err());
    }

    #[test]
    fn missing_grad_rejected() {
        let mut a = Tensor::zeros(&[2]).with_requires_grad(true);
        let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
        assert!(opt.step(&mut [&mut a], 1e-3).is_err());
    }

    #[test]
    fn trajectories_are_reproducible() {
        let run = || {
            let mut p = Tensor::from_vec(vec![0.3, -0.1, 0.8]).with_requires_grad(true);
            let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
            for k in 0..20 {
                p.zero_grad();
                let g: Vec<f64> = p.data().iter().map(|x| 2.0 * x + k as f64 * 0.01).collect();
                p.accumulate_grad(&g).unwrap();
                opt.step(&mut [&mut p], 1e-2).unwrap();
            }
            p.into_data()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule::new(1e-4, 0.0, 20).unwrap();
        assert_eq!(s.lr(0).unwrap(), 1e-4);
        assert_eq!(s.lr(20).unwrap(), 0.0);
        assert!((s.lr(10).unwrap() - 0.5e-4).abs() < 1e-20);
        assert!(s.lr(21).is_err());
        let s = CosineSchedule::new(1e-3, 1e-5, 7).unwrap();
        assert_eq!(s.lr(7).unwrap(), 1e-5);
        assert!(CosineSchedule::new(1e-3, 0.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn cosine_monotone_and_bounded(total in 1usize..200, lr_max in 1e-6f64..1.0, frac in 0.0f64..1.0) {
            let s = CosineSchedule::new(lr_max, lr_max * frac, total).unwrap();
            let mut prev = f64::INFINITY;
            for t in 0..=total {
                let lr = s.lr(t).unwrap();
                prop_assert!(lr <= prev);
                prop_assert!(lr >= s.eta_min && lr <= s.lr_max);
                prev = lr;
            }
        }
    }
}
