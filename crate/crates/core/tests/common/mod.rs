//! Scalar double-loop references for the contrastive losses, written
//! directly from their definitions.
#![allow(dead_code)]

use candle_core::{Device, Tensor};
use crvl::losses::{sce, sigcl, unicl};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn log_sig(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub struct Batch {
    pub zi: Vec<Vec<f64>>,
    pub zt: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub t: f64,
    pub b: f64,
}

impl Batch {
    pub fn d(&self, i: usize, j: usize) -> f64 {
        dot(&self.zi[i], &self.zt[j])
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn ref_sigcl(&self) -> f64 {
        let n = self.n();
        let (mut pos, mut n_pos, mut neg) = (0.0, 0usize, 0.0);
        for i in 0..n {
            for j in 0..n {
                let logit = self.t * self.d(i, j) - self.b;
                if self.labels[i] == self.labels[j] {
                    pos += log_sig(logit);
                    n_pos += 1;
                } else {
                    neg += log_sig(-logit);
                }
            }
        }
        -pos / n_pos as f64 - neg / n as f64
    }

    pub fn ref_unicl(&self) -> f64 {
        let n = self.n();
        let mut i2t = 0.0;
        let mut t2i = 0.0;
        for i in 0..n {
            let row: Vec<f64> = (0..n).map(|j| self.t * self.d(i, j)).collect();
            let col: Vec<f64> = (0..n).map(|j| self.t * self.d(j, i)).collect();
            let (lr, lc) = (logsumexp(&row), logsumexp(&col));
            let positives: Vec<usize> = (0..n).filter(|&j| self.labels[j] == self.labels[i]).collect();
            for &j in &positives {
                i2t -= (row[j] - lr) / positives.len() as f64;
                t2i -= (col[j] - lc) / positives.len() as f64;
            }
        }
        0.5 * (i2t + t2i) / n as f64
    }

    pub fn ref_sce(&self) -> f64 {
        let n = self.n();
        let mut total = 0.0;
        for i in 0..n {
            let row: Vec<f64> = (0..n).map(|j| self.t * self.d(i, j)).collect();
            let col: Vec<f64> = (0..n).map(|j| self.t * self.d(j, i)).collect();
            total -= 0.5 * ((row[i] - logsumexp(&row)) + (col[i] - logsumexp(&col)));
        }
        total / n as f64
    }

    pub fn tensors(&self) -> (Tensor, Tensor, Tensor, Tensor) {
        let n = self.n();
        let d = self.zi[0].len();
        let flat = |z: &[Vec<f64>]| Tensor::from_vec(z.concat(), (n, d), &Device::Cpu).unwrap();
        (
            flat(&self.zi),
            flat(&self.zt),
            Tensor::new(self.t.ln(), &Device::Cpu).unwrap(),
            Tensor::new(self.b, &Device::Cpu).unwrap(),
        )
    }

    pub fn ours(&self) -> [f64; 3] {
        let (zi, zt, log_t, bias) = self.tensors();
        let s = |t: Tensor| t.to_scalar::<f64>().unwrap();
        [
            s(sigcl(&zi, &zt, &self.labels, &log_t, &bias).unwrap()),
            s(unicl(&zi, &zt, &self.labels, &log_t).unwrap()),
            s(sce(&zi, &zt, &log_t).unwrap()),
        ]
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            zi: perm.iter().map(|&p| self.zi[p].clone()).collect(),
            zt: perm.iter().map(|&p| self.zt[p].clone()).collect(),
            labels: perm.iter().map(|&p| self.labels[p]).collect(),
            t: self.t,
            b: self.b,
        }
    }
}

pub fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = dot(&v, &v).sqrt().max(1e-9);
    v.into_iter().map(|x| x / n).collect()
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> Batch {
    let d = rng.random_range(2..=12);
    Batch {
        zi: (0..n).map(|_| unit(rng, d)).collect(),
        zt: (0..n).map(|_| unit(rng, d)).collect(),
        labels: (0..n).map(|_| rng.random_range(0..5)).collect(),
        t: rng.random_range(0.5..20.0),
        b: rng.random_range(-12.0..12.0),
    }
}

