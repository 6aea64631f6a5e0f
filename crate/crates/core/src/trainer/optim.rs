use candle_core::backprop::GradStore;
use candle_core::Tensor;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.02,
        }
    }
}

/// Adam with decoupled weight decay over a named subset of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    /// Number of updates applied so far.
    pub step: u64,
    trainable: Vec<String>,
    decayed: Vec<bool>,
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
}

impl AdamW {
    /// Optimises every parameter whose name starts with one of `prefixes`;
    /// those matching `no_decay` skip the weight-decay term.
    pub fn new(store: &ParamStore, cfg: AdamWConfig, prefixes: &[&str], no_decay: &[&str]) -> Result<Self> {
        let mut trainable = Vec::new();
        let mut decayed = Vec::new();
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (name, var) in store.iter() {
            if !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            trainable.push(name.to_string());
            decayed.push(!no_decay.iter().any(|p| name.starts_with(p)));
            m.insert(name.to_string(), var.zeros_like()?);
            v.insert(name.to_string(), var.zeros_like()?);
        }
        Ok(Self {
            cfg,
            step: 0,
            trainable,
            decayed,
            m,
            v,
        })
    }

    pub fn trainable(&self) -> &[String] {
        &self.trainable
    }

    pub fn is_decayed(&self, name: &str) -> bool {
        self.trainable
            .iter()
            .position(|n| n == name)
            .is_some_and(|i| self.decayed[i])
    }

    /// `theta <- theta (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
    /// Parameters without a gradient are treated as having a zero gradient.
    /// Every gradient is checked for finiteness before any parameter moves.
    pub fn update(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        let mut gs = Vec::with_capacity(self.trainable.len());
        for name in &self.trainable {
            let var = store
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("optimizer lost parameter {name}")))?;
            let g = match grads.get(var.as_tensor()) {
                Some(g) => flat(g)?,
                None => vec![0.0; var.elem_count()],
            };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name} at step {}", self.step)));
            }
            gs.push(g);
        }
        let t = (self.step + 1) as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((i, name), g) in self.trainable.iter().enumerate().zip(gs) {
            let var = store.get(name).expect("checked above");
            let theta = var.as_tensor();
            let mut p = flat(theta)?;
            let mut m = flat(&self.m[name])?;
            let mut v = flat(&self.v[name])?;
            let keep = if self.decayed[i] { 1.0 - lr * c.weight_decay } else { 1.0 };
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let step = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                p[j] = p[j] * keep - lr * step;
            }
            let like = |x: Vec<f64>| -> Result<Tensor> {
                Ok(Tensor::from_vec(x, theta.dims(), theta.device())?.to_dtype(theta.dtype())?)
            };
            var.set(&like(p)?)?;
            self.m.insert(name.clone(), like(m)?);
            self.v.insert(name.clone(), like(v)?);
        }
        self.step += 1;
        Ok(())
    }
}

fn flat(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use crate::rng::derive_rng;
    use candle_core::{DType, Device};

    #[test]
    fn matches_scalar_adamw() {
        let mut store = ParamStore::new(DType::F64);
        let rng = &mut derive_rng(0, &[]);
        let w = store.param("a.w", &[2], Init::Zeros, rng).unwrap();
        store.param("a.idle", &[1], Init::Ones, rng).unwrap();
        store.param("b.t", &[1], Init::Ones, rng).unwrap();
        store.get("a.w").unwrap().set(&Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let cfg = AdamWConfig::default();
        let mut opt = AdamW::new(&store, cfg, &["a.", "b."], &["b."]).unwrap();
        assert!(opt.is_decayed("a.w") && !opt.is_decayed("b.t"));
        let c = [0.5, -1.0];
        let (lr, mut p, mut m, mut v) = (0.1, [1.0f64, -2.0], [0.0f64; 2], [0.0f64; 2]);
        let mut t_param = 1.0f64;
        for t in 1..=3 {
            let x = Tensor::new(&c, &Device::Cpu).unwrap();
            let bt = store.get("b.t").unwrap().as_tensor().clone();
            let loss = (w.mul(&x).unwrap().sum_all().unwrap() + (bt.sum_all().unwrap() * 3.0).unwrap()).unwrap();
            opt.update(&store, &loss.backward().unwrap(), lr).unwrap();
            for j in 0..2 {
                m[j] = 0.9 * m[j] + 0.1 * c[j];
                v[j] = 0.999 * v[j] + 0.001 * c[j] * c[j];
                let mh = m[j] / (1.0 - 0.9f64.powi(t));
                let vh = v[j] / (1.0 - 0.999f64.powi(t));
                p[j] = p[j] * (1.0 - lr * 0.02) - lr * mh / (vh.sqrt() + 1e-8);
            }
            // constant gradient 3: each Adam step moves by lr, no decay
            t_param -= lr * 3.0 / (3.0 + 1e-8);
        }
        let got = store.get("a.w").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        for j in 0..2 {
            assert!((got[j] - p[j]).abs() < 1e-12, "{got:?} vs {p:?}");
        }
        let idle = store.get("a.idle").unwrap().as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((idle - (1.0 - lr * 0.02).powi(3)).abs() < 1e-12);
        let tv = store.get("b.t").unwrap().as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((tv - t_param).abs() < 1e-9, "{tv} vs {t_param}");
        assert_eq!(opt.step, 3);
    }

    #[test]
    fn non_finite_gradient_leaves_parameters_untouched() {
        let mut store = ParamStore::new(DType::F64);
        let rng = &mut derive_rng(0, &[]);
        let w = store.param("a.w", &[1], Init::Ones, rng).unwrap();
        let mut opt = AdamW::new(&store, AdamWConfig::default(), &["a."], &[]).unwrap();
        let loss = w.affine(1.0, -1.0).unwrap().sqrt().unwrap().sum_all().unwrap();
        let err = opt.update(&store, &loss.backward().unwrap(), 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(store.get("a.w").unwrap().as_tensor().to_vec1::<f64>().unwrap(), vec![1.0]);
        assert_eq!(opt.step, 0);
    }
}
