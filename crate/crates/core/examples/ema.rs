//! Exponential moving average of the style encoder: the target tracks a
//! drifting online copy and the gap shrinks geometrically once it stops.

use candle_core::{Device, Tensor, Var};
use crvl::model::ema_update;

fn gap(a: &Var, b: &Var) -> crvl::Result<f64> {
    Ok((a.as_tensor() - b.as_tensor())?.sqr()?.sum_all()?.sqrt()?.to_vec0::<f64>()?)
}

fn main() -> crvl::Result<()> {
    let dev = Device::Cpu;
    let tau = 0.9;
    let target = Var::from_tensor(&Tensor::zeros((4, 4), candle_core::DType::F64, &dev)?)?;
    let online = Var::from_tensor(&Tensor::ones((4, 4), candle_core::DType::F64, &dev)?)?;
    let start = gap(&target, &online)?;
    for n in 1..=10 {
        ema_update(&target, &online, tau)?;
        let g = gap(&target, &online)?;
        println!("step {n:>2}: gap {g:.6}  tau^n * gap0 {:.6}", tau.powi(n) * start);
    }
    ema_update(&target, &online, 0.0)?;
    println!("tau = 0 copies the online weights: gap {:.1}", gap(&target, &online)?);
    Ok(())
}
