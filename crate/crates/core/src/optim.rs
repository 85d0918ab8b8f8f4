//! LAMB with layer-wise trust ratio, and the warm-up / linear-decay schedule.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambConfig {
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Upper clip on the trust ratio.
    pub trust_clip: f64,
}

impl Default for LambConfig {
    fn default() -> Self {
        Self {
            lr_peak: 6e-3,
            beta1: 0.878,
            beta2: 0.974,
            eps: 1e-6,
            weight_decay: 0.01,
            trust_clip: 10.0,
        }
    }
}

impl LambConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_peak >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.trust_clip > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moments and step counter for every parameter of one store.
#[derive(Debug, Clone, PartialEq)]
pub struct Lamb<T> {
    pub config: LambConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

/// Trust ratio applied to each parameter in the last step.
#[derive(Debug, Clone, PartialEq)]
pub struct LambReport {
    pub trust_ratios: Vec<f64>,
}

impl<T: Real> Lamb<T> {
    pub fn new(config: LambConfig, store: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Ok(Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    /// Restores saved state; shapes must match the current moments.
    pub fn restore(&mut self, t: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<()> {
        let same = |a: &[Tensor<T>], b: &[Tensor<T>]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
        };
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(Error::contract("optimizer state does not match the parameter set"));
        }
        if v.iter().flat_map(|t| t.data()).any(|&x| x < T::ZERO) {
            return Err(Error::contract("negative second moment"));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Applies one update with learning rate `lr` using the gradients held
    /// in `store`. Nothing changes if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<LambReport> {
        if !(lr >= 0.0) {
            return Err(Error::contract(format!("learning rate {lr} must be >= 0")));
        }
        if store.len() != self.m.len() {
            return Err(Error::contract("optimizer was built for a different parameter set"));
        }
        for (_, p) in store.iter() {
            if !p.grad.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
            }
        }
        let c = self.config;
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - libm::pow(c.beta1, t);
        let bc2 = 1.0 - libm::pow(c.beta2, t);
        let mut ratios = Vec::with_capacity(store.len());
        let mut update = Vec::new();
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let wd = if p.decay_exempt { 0.0 } else { c.weight_decay };
            update.clear();
            let mut u_sq = 0.0f64;
            let mut w_sq = 0.0f64;
            for (((&g, mi), vi), &w) in p
                .grad
                .data()
                .iter()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(p.value.data())
            {
                let g = g.to_f64();
                let m_new = c.beta1 * mi.to_f64() + (1.0 - c.beta1) * g;
                let v_new = c.beta2 * vi.to_f64() + (1.0 - c.beta2) * g * g;
                *mi = T::from_f64(m_new);
                *vi = T::from_f64(v_new);
                let r = (m_new / bc1) / (libm::sqrt(v_new / bc2) + c.eps);
                let w = w.to_f64();
                let u = r + wd * w;
                u_sq += u * u;
                w_sq += w * w;
                update.push(u);
            }
            let (w_norm, u_norm) = (libm::sqrt(w_sq), libm::sqrt(u_sq));
            let trust = if w_norm > 0.0 && u_norm > 0.0 {
                (w_norm / u_norm).clamp(0.0, c.trust_clip)
            } else {
                1.0
            };
            for (w, &u) in p.value.data_mut().iter_mut().zip(&update) {
                *w = T::from_f64(w.to_f64() - lr * trust * u);
            }
            ratios.push(trust);
        }
        Ok(LambReport {
            trust_ratios: ratios,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if warmup_steps == 0 || warmup_steps >= total_steps {
            return Err(Error::config(format!(
                "need 0 < warmup_steps ({warmup_steps}) < total_steps ({total_steps})"
            )));
        }
        Ok(Self {
            warmup_steps,
            total_steps,
        })
    }
}

/// Linear warm-up to `lr_peak`, then linear decay to zero at `total_steps`.
pub fn lr_at(step: u64, schedule: Schedule, lr_peak: f64) -> f64 {
    let s = step.min(schedule.total_steps) as f64;
    let up = s / schedule.warmup_steps as f64;
    let down = (schedule.total_steps as f64 - s)
        / (schedule.total_steps - schedule.warmup_steps) as f64;
    lr_peak * up.min(down).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn store(values: &[f64], exempt: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("w", Tensor::from_f64(&[values.len()], values).unwrap(), exempt)
            .unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_a_null_update() {
        let mut s = store(&[1.0, -2.0], false);
        let mut opt = Lamb::new(
            LambConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &s,
        )
        .unwrap();
        let before = s.clone();
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.get(s.id("w").unwrap()).value, before.get(before.id("w").unwrap()).value);
    }

    #[test]
    fn zero_weight_norm_uses_unit_trust() {
        let mut s = store(&[0.0, 0.0], false);
        s.get_mut(s.id("w").unwrap()).grad = Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap();
        let mut opt = Lamb::new(LambConfig::default(), &s).unwrap();
        let r = opt.step(&mut s, 0.01).unwrap();
        assert_eq!(r.trust_ratios, vec![1.0]);
    }

    #[test]
    fn non_finite_gradient_aborts_without_change() {
        let mut s = store(&[1.0], false);
        s.get_mut(s.id("w").unwrap()).grad = Tensor::from_f64(&[1], &[f64::NAN]).unwrap();
        let mut opt = Lamb::new(LambConfig::default(), &s).unwrap();
        let before = (s.by_name("w").unwrap().value.clone(), opt.clone());
        let e = opt.step(&mut s, 0.1).unwrap_err();
        assert!(matches!(e, Error::NonFinite(ref m) if m.contains("`w`")));
        assert_eq!((s.by_name("w").unwrap().value.clone(), opt), before);
    }

    #[test]
    fn schedule_shape() {
        let s = Schedule::new(2_000, 10_000).unwrap();
        assert_eq!(lr_at(0, s, 6e-3), 0.0);
        assert_eq!(lr_at(2_000, s, 6e-3), 6e-3);
        assert!((lr_at(6_000, s, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(lr_at(10_000, s, 1.0), 0.0);
        assert!(Schedule::new(0, 10).is_err());
        assert!(Schedule::new(10, 10).is_err());
    }
}
