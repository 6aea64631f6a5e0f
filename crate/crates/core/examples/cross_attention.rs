//! One cross-attention layer: image patch queries attend to text tokens.
//! Prints the weight rows (each sums to one) and shows that with a single
//! key the attended output is the projected value of that key.

use candle_core::{DType, Device, Tensor};
use crvl::nn::{Attention, ParamStore};
use crvl::rng::derive_rng;

fn main() -> crvl::Result<()> {
    let (d, heads) = (16, 4);
    let mut store = ParamStore::new(DType::F64);
    let mut rng = derive_rng(3, &[]);
    let attn = Attention::new(&mut store, "demo", d, heads, 0.2, &mut rng)?;

    let patches = Tensor::randn(0f64, 1.0, (1, 6, d), &Device::Cpu)?;
    let words = Tensor::randn(0f64, 1.0, (1, 5, d), &Device::Cpu)?;
    // The fifth word is padding.
    let w = attn.weights(&patches, &words, Some(&[4]))?.squeeze(0)?.to_vec3::<f64>()?;
    for (q, row) in w[0].iter().enumerate() {
        let fmt: Vec<String> = row.iter().map(|x| format!("{x:.3}")).collect();
        println!("head 0 patch {q}: [{}] sum {:.6}", fmt.join(", "), row.iter().sum::<f64>());
    }

    let single = words.narrow(1, 0, 1)?;
    let out = attn.forward(&patches, &single, None)?;
    let expect = attn
        .output_projection(&attn.value_projection(&single)?)?
        .broadcast_as(out.dims())?;
    let diff = (out - expect)?.abs()?.max_all()?.to_vec0::<f64>()?;
    println!("singleton memory: max |out - o(v(x))| = {diff:.2e}");
    Ok(())
}
