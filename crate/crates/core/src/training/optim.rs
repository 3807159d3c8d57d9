use crate::error::{config_err, contract_err, Result};
use crate::params::ParamStore;
use crate::tensor::Precision;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self;
        if !(c.learning_rate >= 0.0 && c.weight_decay >= 0.0 && c.epsilon > 0.0) {
            return Err(config_err!("learning rate and weight decay must be >= 0 and epsilon > 0"));
        }
        if !((0.0..1.0).contains(&c.beta1) && (0.0..1.0).contains(&c.beta2)) {
            return Err(config_err!("betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub precision: Precision,
    pub step: u64,
    /// First and second moments, one buffer per parameter in store order.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self { config, precision: Precision::Double, step: 0, m: zeros(), v: zeros() }
    }

    /// `p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p`. Gradients are left in place.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(contract_err!("optimizer tracks {} parameters, store has {}", self.m.len(), params.len()));
        }
        for (name, t) in params.iter() {
            if t.grad().is_none() {
                return Err(contract_err!("parameter {name} has no gradient"));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(self.step as f64);
        let bc2 = 1.0 - c.beta2.powf(self.step as f64);
        let single = self.precision == Precision::Single;
        for (k, (_, t)) in params.iter_mut().enumerate() {
            let g = t.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let (mh, vh) = (m[i] / bc1, v[i] / bc2);
                let mut next = *p - c.learning_rate * mh / (vh.sqrt() + c.epsilon) - c.learning_rate * c.weight_decay * *p;
                if single {
                    next = next as f32 as f64;
                }
                *p = next;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(value: f64, grad: Option<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::new([1], vec![value]).unwrap());
        if let Some(g) = grad {
            s.get_mut(id).set_grad(vec![g]).unwrap();
        }
        s
    }

    #[test]
    fn first_step_matches_hand_value() {
        let mut s = store(1.0, Some(0.5));
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.step(&mut s).unwrap();
        let want = 1.0 - 1e-4 * (0.5 / (0.5 + 1e-8)) - 1e-4 * 1e-4 * 1.0;
        let got = s.iter().next().unwrap().1.data()[0];
        assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        assert!((got - 0.9999).abs() < 1e-6);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut s = store(0.3, Some(0.0));
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().1.data()[0], 0.3);
    }

    #[test]
    fn decay_only_shrinks_geometrically() {
        let mut s = store(2.0, Some(0.0));
        let cfg = AdamWConfig { weight_decay: 0.1, learning_rate: 0.01, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &s);
        for _ in 0..3 {
            opt.step(&mut s).unwrap();
        }
        let got = s.iter().next().unwrap().1.data()[0];
        assert!((got - 2.0 * (1.0f64 - 0.001).powi(3)).abs() < 1e-14);
    }

    #[test]
    fn zero_learning_rate_is_bit_identical() {
        let mut s = store(0.123456789, Some(3.0));
        let cfg = AdamWConfig { learning_rate: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().1.data()[0].to_bits(), 0.123456789f64.to_bits());
    }

    #[test]
    fn missing_grad_is_a_contract_error() {
        let mut s = store(1.0, None);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        assert!(matches!(opt.step(&mut s), Err(crate::Error::Contract(_))));
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn single_precision_rounds_through_f32() {
        let mut s = store(1.0, Some(0.5));
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.precision = Precision::Single;
        opt.step(&mut s).unwrap();
        let v = s.iter().next().unwrap().1.data()[0];
        assert_eq!(v, v as f32 as f64);
    }
}
