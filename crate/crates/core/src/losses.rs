//! Training objectives over batches of L2-normalised joint embeddings.
//!
//! `d_ij = z_i . z_j` for image `i` and text `j`. The logit scale `t` is kept
//! as `log t` so that it stays positive.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_sigmoid, log_softmax_rows};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// Supervised sigmoid contrastive loss; same-rating pairs are positives.
    SigCl,
    /// Supervised bidirectional InfoNCE.
    UniCl,
    /// Symmetric cross-entropy against the diagonal.
    Sce,
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sigcl" => Ok(LossVariant::SigCl),
            "unicl" => Ok(LossVariant::UniCl),
            "sce" => Ok(LossVariant::Sce),
            other => Err(Error::Config(format!("unknown loss variant {other:?}"))),
        }
    }
}

fn similarities(z_img: &Tensor, z_txt: &Tensor) -> Result<Tensor> {
    let (b, d) = z_img.dims2()?;
    if b == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    if z_txt.dims2()? != (b, d) {
        return Err(Error::Shape(format!(
            "image embeddings {:?} vs text embeddings {:?}",
            z_img.dims(),
            z_txt.dims()
        )));
    }
    Ok(z_img.matmul(&z_txt.t()?)?)
}

fn constant(values: Vec<f64>, b: usize, like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, (b, b), &Device::Cpu)?.to_dtype(like.dtype())?)
}

fn check_square(sim: &Tensor) -> Result<usize> {
    let (b, b2) = sim.dims2()?;
    if b == 0 || b != b2 {
        return Err(Error::Shape(format!("similarity matrix {:?} is empty or not square", sim.dims())));
    }
    Ok(b)
}

fn check_labels(labels: &[usize], b: usize) -> Result<()> {
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    Ok(())
}

/// Supervised sigmoid contrastive loss.
///
/// `-(1/|P|) sum_P log s(t d_ij - b) - (1/|B|) sum_i sum_{j: y_j != y_i} log s(b - t d_ij)`
/// where `P` holds every ordered pair with equal labels, the diagonal included.
pub fn sigcl(z_img: &Tensor, z_txt: &Tensor, labels: &[usize], log_t: &Tensor, bias: &Tensor) -> Result<Tensor> {
    sigcl_sim(&similarities(z_img, z_txt)?, labels, log_t, bias)
}

/// [`sigcl`] over a precomputed `[B, B]` similarity matrix.
pub fn sigcl_sim(sim: &Tensor, labels: &[usize], log_t: &Tensor, bias: &Tensor) -> Result<Tensor> {
    check_square(sim)?;
    let b = labels.len();
    check_labels(labels, sim.dim(0)?)?;
    let mut pos = Vec::with_capacity(b * b);
    for &yi in labels {
        pos.extend(labels.iter().map(|&yj| if yi == yj { 1.0 } else { 0.0 }));
    }
    let n_pos: f64 = pos.iter().sum();
    let neg: Vec<f64> = pos.iter().map(|p| 1.0 - p).collect();
    let pos = constant(pos, b, sim)?;
    let neg = constant(neg, b, sim)?;

    let logits = sim.broadcast_mul(&log_t.exp()?)?.broadcast_sub(bias)?;
    let pos_term = (log_sigmoid(&logits)? * pos)?.sum_all()?.affine(-1.0 / n_pos, 0.0)?;
    let neg_term = (log_sigmoid(&logits.neg()?)? * neg)?
        .sum_all()?
        .affine(-1.0 / b as f64, 0.0)?;
    Ok((pos_term + neg_term)?)
}

/// `-(1/B) sum_i sum_j w_ij log softmax_j(logits_i)`.
fn weighted_row_ce(logits: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let b = logits.dim(0)?;
    Ok((log_softmax_rows(logits)? * weights)?
        .sum_all()?
        .affine(-1.0 / b as f64, 0.0)?)
}

/// Supervised bidirectional InfoNCE: each row's positives share its label
/// and each positive target carries weight `1/|P(i)|`.
pub fn unicl(z_img: &Tensor, z_txt: &Tensor, labels: &[usize], log_t: &Tensor) -> Result<Tensor> {
    unicl_sim(&similarities(z_img, z_txt)?, labels, log_t)
}

/// [`unicl`] over a precomputed `[B, B]` similarity matrix.
pub fn unicl_sim(sim: &Tensor, labels: &[usize], log_t: &Tensor) -> Result<Tensor> {
    check_square(sim)?;
    let b = labels.len();
    check_labels(labels, sim.dim(0)?)?;
    let mut w = Vec::with_capacity(b * b);
    for &yi in labels {
        let n = labels.iter().filter(|&&y| y == yi).count() as f64;
        w.extend(labels.iter().map(|&yj| if yi == yj { 1.0 / n } else { 0.0 }));
    }
    let w = constant(w, b, sim)?;
    let logits = sim.broadcast_mul(&log_t.exp()?)?;
    let i2t = weighted_row_ce(&logits, &w)?;
    let t2i = weighted_row_ce(&logits.t()?.contiguous()?, &w)?;
    Ok(((i2t + t2i)? * 0.5)?)
}

/// CLIP's symmetric cross-entropy with the matching pair as the only target.
pub fn sce(z_img: &Tensor, z_txt: &Tensor, log_t: &Tensor) -> Result<Tensor> {
    sce_sim(&similarities(z_img, z_txt)?, log_t)
}

/// [`sce`] over a precomputed `[B, B]` similarity matrix.
pub fn sce_sim(sim: &Tensor, log_t: &Tensor) -> Result<Tensor> {
    let b = check_square(sim)?;
    let eye = Tensor::eye(b, sim.dtype(), &Device::Cpu)?;
    let logits = sim.broadcast_mul(&log_t.exp()?)?;
    let rows = weighted_row_ce(&logits, &eye)?;
    let cols = weighted_row_ce(&logits.t()?.contiguous()?, &eye)?;
    Ok(((rows + cols)? * 0.5)?)
}

/// `||q_s - q_s'||^2` as a sum over coordinates.
pub fn mse_style(q_s: &Tensor, q_s_online: &Tensor) -> Result<Tensor> {
    if q_s.dims() != q_s_online.dims() {
        return Err(Error::Shape(format!(
            "style vectors {:?} vs {:?}",
            q_s.dims(),
            q_s_online.dims()
        )));
    }
    Ok((q_s - q_s_online)?.sqr()?.sum_all()?)
}

/// Batch mean of the per-image squared distances, `[B, d]` inputs.
pub fn mse_style_batch(q_s: &Tensor, q_s_online: &Tensor) -> Result<Tensor> {
    let b = q_s.dim(0)?;
    Ok(mse_style(q_s, q_s_online)?.affine(1.0 / b as f64, 0.0)?)
}

/// `contrastive + lambda * mse`.
pub fn total_loss(contrastive: &Tensor, mse: &Tensor, lambda: f64) -> Result<Tensor> {
    if lambda < 0.0 {
        return Err(Error::Invalid(format!("lambda {lambda} is negative")));
    }
    Ok((contrastive + mse.affine(lambda, 0.0)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;

    const LN2: f64 = std::f64::consts::LN_2;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn s(x: &Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    fn orthogonal_pairs(b: usize) -> (Tensor, Tensor) {
        let img: Vec<f64> = (0..b).flat_map(|_| [1.0, 0.0]).collect();
        let txt: Vec<f64> = (0..b).flat_map(|_| [0.0, 1.0]).collect();
        (t(&img, &[b, 2]), t(&txt, &[b, 2]))
    }

    fn scalar_param(v: f64) -> Tensor {
        t(&[v], &[1])
    }

    #[test]
    fn trivial_values() {
        let (zi, zt) = orthogonal_pairs(2);
        let zero = scalar_param(0.0);
        assert!((s(&sigcl(&zi, &zt, &[0, 1], &zero, &zero).unwrap()) - 2.0 * LN2).abs() < 1e-12);
        assert!((s(&sigcl(&zi, &zt, &[3, 3], &zero, &zero).unwrap()) - LN2).abs() < 1e-12);
        assert!((s(&unicl(&zi, &zt, &[0, 1], &zero).unwrap()) - LN2).abs() < 1e-12);
        assert!((s(&sce(&zi, &zt, &zero).unwrap()) - LN2).abs() < 1e-12);
        let one = t(&[0.6, 0.8], &[1, 2]);
        assert_eq!(s(&sce(&one, &one, &scalar_param(2.3)).unwrap()), 0.0);
        assert_eq!(s(&unicl(&one, &one, &[4], &scalar_param(2.3)).unwrap()), 0.0);
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        let z = Tensor::zeros((0, 3), candle_core::DType::F64, &Device::Cpu).unwrap();
        let p = scalar_param(0.0);
        assert!(sigcl(&z, &z, &[], &p, &p).is_err());
        assert!(sce(&z, &z, &p).is_err());
        let (zi, zt) = orthogonal_pairs(2);
        assert!(unicl(&zi, &zt, &[1], &p).is_err());
        assert!(sigcl(&zi, &t(&[1.0, 0.0], &[1, 2]), &[0, 1], &p, &p).is_err());
    }

    #[test]
    fn style_mse_examples() {
        let a = t(&[1.0, 2.0], &[2]);
        assert_eq!(s(&mse_style(&a, &a).unwrap()), 0.0);
        assert_eq!(s(&mse_style(&a, &t(&[0.0, 0.0], &[2])).unwrap()), 5.0);
        assert_eq!(s(&mse_style(&t(&[0.0, 1.0], &[2]), &t(&[0.0, 0.0], &[2])).unwrap()), 1.0);
        assert!(mse_style(&a, &t(&[1.0], &[1])).is_err());
        let batch = t(&[1.0, 2.0, 0.0, 0.0], &[2, 2]);
        assert_eq!(s(&mse_style_batch(&batch, &batch.zeros_like().unwrap()).unwrap()), 2.5);
    }

    #[test]
    fn total_loss_examples() {
        let (c, m) = (scalar_param(1.0), scalar_param(0.2));
        assert!((s(&total_loss(&c, &m, 5.0).unwrap().sum_all().unwrap()) - 2.0).abs() < 1e-12);
        assert_eq!(s(&total_loss(&c, &m, 0.0).unwrap().sum_all().unwrap()), 1.0);
        assert_eq!(s(&total_loss(&c, &scalar_param(0.0), 5.0).unwrap().sum_all().unwrap()), 1.0);
        assert!(total_loss(&c, &m, -1.0).is_err());
    }

    #[test]
    fn sigcl_is_monotone_in_each_similarity() {
        let labels = [0, 1, 0, 2];
        let base: Vec<f64> = (0..16).map(|k| ((k * 7) % 11) as f64 / 11.0 - 0.5).collect();
        let (log_t, bias) = (scalar_param(10f64.ln()), scalar_param(10.0));
        let eval = |d: &[f64]| s(&sigcl_sim(&t(d, &[4, 4]), &labels, &log_t, &bias).unwrap());
        let l0 = eval(&base);
        for i in 0..4 {
            for j in 0..4 {
                let mut d = base.clone();
                d[i * 4 + j] += 1e-3;
                let l1 = eval(&d);
                if labels[i] == labels[j] {
                    assert!(l1 < l0, "positive ({i},{j})");
                } else {
                    assert!(l1 > l0, "negative ({i},{j})");
                }
            }
        }
    }

    /// Central differences of every loss against its analytic gradient.
    #[test]
    fn gradients_match_finite_differences() {
        let b = 5;
        let d = 3;
        let labels = [0, 1, 0, 2, 1];
        let vals = |seed: usize, n: usize| -> Vec<f64> { (0..n).map(|k| (((k + seed) * 37 % 23) as f64 / 23.0) - 0.45).collect() };
        let zi = Var::from_tensor(&t(&vals(1, b * d), &[b, d])).unwrap();
        let zt = Var::from_tensor(&t(&vals(5, b * d), &[b, d])).unwrap();
        let log_t = Var::from_tensor(&scalar_param(0.7)).unwrap();
        let bias = Var::from_tensor(&scalar_param(1.3)).unwrap();
        let losses: [&dyn Fn() -> Tensor; 3] = [
            &|| sigcl(zi.as_tensor(), zt.as_tensor(), &labels, log_t.as_tensor(), bias.as_tensor()).unwrap(),
            &|| unicl(zi.as_tensor(), zt.as_tensor(), &labels, log_t.as_tensor()).unwrap(),
            &|| sce(zi.as_tensor(), zt.as_tensor(), log_t.as_tensor()).unwrap(),
        ];
        let h = 1e-4;
        for f in losses {
            let grads = f().backward().unwrap();
            for var in [&zi, &zt, &log_t, &bias] {
                let analytic = match grads.get(var.as_tensor()) {
                    Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
                    None => vec![0.0; var.elem_count()],
                };
                let orig = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                for k in 0..orig.len() {
                    let at = |delta: f64| {
                        let mut v = orig.clone();
                        v[k] += delta;
                        var.set(&t(&v, var.dims())).unwrap();
                        s(&f())
                    };
                    let numeric = (at(h) - at(-h)) / (2.0 * h);
                    var.set(&t(&orig, var.dims())).unwrap();
                    let rel = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-8);
                    assert!(rel <= 1e-5 || (analytic[k] - numeric).abs() < 1e-9, "{} vs {}", analytic[k], numeric);
                }
            }
        }
    }
}
