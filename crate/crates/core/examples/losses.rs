//! Evaluates the three contrastive objectives on random unit embeddings
//! with a few shared labels, plus the style MSE and the combined loss.

use candle_core::{Device, Tensor};
use crvl::losses::{mse_style_batch, sce, sigcl, total_loss, unicl};
use crvl::nn::l2_normalize;

fn main() -> crvl::Result<()> {
    let dev = Device::Cpu;
    let (b, d) = (8, 16);
    let z_img = l2_normalize(&Tensor::randn(0f64, 1.0, (b, d), &dev)?)?;
    let z_txt = l2_normalize(&Tensor::randn(0f64, 1.0, (b, d), &dev)?)?;
    let labels = [0, 0, 1, 2, 2, 2, 3, 4];
    let log_t = Tensor::new(10f64.ln(), &dev)?;
    let bias = Tensor::new(10f64, &dev)?;

    let s = sigcl(&z_img, &z_txt, &labels, &log_t, &bias)?;
    let u = unicl(&z_img, &z_txt, &labels, &log_t)?;
    let c = sce(&z_img, &z_txt, &log_t)?;
    for (name, v) in [("sigcl", &s), ("unicl", &u), ("sce", &c)] {
        println!("{name:<6} {:.6}", v.to_vec0::<f64>()?);
    }

    let q_s = Tensor::randn(0f64, 1.0, (b, d), &dev)?;
    let q_online = (&q_s + Tensor::randn(0f64, 0.1, (b, d), &dev)?)?;
    let mse = mse_style_batch(&q_s, &q_online)?;
    let total = total_loss(&s, &mse, 5.0)?;
    println!("mse    {:.6}", mse.to_vec0::<f64>()?);
    println!("total  {:.6} (sigcl + 5 * mse)", total.to_vec0::<f64>()?);
    Ok(())
}
