//! Renders one synthetic icon, then writes an augmented view, a masked view
//! and a description chunk next to it.

use crvl::image::ImageBuffer;
use crvl::rng::derive_rng;
use crvl::synth::{augment_image, chunk_description, mask_patches, rating_of, render_image, LatentFactors};

fn main() -> crvl::Result<()> {
    let mut rng = derive_rng(7, &[]);
    let latent = LatentFactors::all().nth(17).expect("latent grid is non-empty");
    println!("latent {latent:?}, rating {}", rating_of(&latent).as_str());
    let icon: ImageBuffer = render_image(&latent, 64, &mut rng);
    let dir = std::env::temp_dir().join("crvl-augment-example");
    std::fs::create_dir_all(&dir).map_err(|e| crvl::Error::io(&dir, e))?;
    icon.write_ppm(&dir.join("icon.ppm"))?;
    augment_image(&icon, &mut rng).write_ppm(&dir.join("augmented.ppm"))?;
    mask_patches(&icon, 8, &mut rng)?.write_ppm(&dir.join("masked.ppm"))?;

    let text = crvl::synth::describe(&latent, 10, &mut rng);
    println!("description: {text}");
    println!("chunk:       {}", chunk_description(&text, &mut rng));
    println!("images in {}", dir.display());
    Ok(())
}
