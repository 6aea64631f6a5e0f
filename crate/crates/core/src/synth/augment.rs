//! Training-time image augmentations.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::rng::Rng;

/// Number of masked blocks per image and their side, in patches.
pub const MASK_BLOCKS: usize = 3;
pub const MASK_BLOCK: usize = 3;

/// A square crop (`side` pixels at `(x0, y0)`) plus optional mirror.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub side: usize,
    pub x0: usize,
    pub y0: usize,
    pub flip: bool,
}

impl AugmentParams {
    pub fn identity(img: &ImageBuffer) -> Self {
        Self {
            side: img.width.min(img.height),
            x0: 0,
            y0: 0,
            flip: false,
        }
    }
}

/// Crop area scale in `[0.8, 1.0]`, uniform offset, flip with probability 1/2.
pub fn sample_augment(img: &ImageBuffer, rng: &mut Rng) -> AugmentParams {
    let scale: f64 = rng.random_range(0.8..=1.0);
    let min_side = img.width.min(img.height);
    let side = ((scale.sqrt() * min_side as f64).round() as usize).clamp(1, min_side);
    AugmentParams {
        side,
        x0: rng.random_range(0..=img.width - side),
        y0: rng.random_range(0..=img.height - side),
        flip: rng.random_bool(0.5),
    }
}

/// Bilinear resize of the crop back to the source size, then the mirror.
pub fn apply_augment(img: &ImageBuffer, p: AugmentParams) -> ImageBuffer {
    let (w, h) = (img.width, img.height);
    let mut out = ImageBuffer::new(w, h);
    let sx = p.side as f32 / w as f32;
    let sy = p.side as f32 / h as f32;
    let max = (p.side - 1) as f32;
    for y in 0..h {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, max);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(p.side - 1);
        let ty = fy - y0 as f32;
        for x in 0..w {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, max);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(p.side - 1);
            let tx = fx - x0 as f32;
            let a = img.get(p.x0 + x0, p.y0 + y0);
            let b = img.get(p.x0 + x1, p.y0 + y0);
            let c = img.get(p.x0 + x0, p.y0 + y1);
            let d = img.get(p.x0 + x1, p.y0 + y1);
            let px: [f32; 3] = std::array::from_fn(|k| {
                let top = a[k] + (b[k] - a[k]) * tx;
                let bottom = c[k] + (d[k] - c[k]) * tx;
                (top + (bottom - top) * ty).clamp(0.0, 1.0)
            });
            let ox = if p.flip { w - 1 - x } else { x };
            out.set(ox, y, px);
        }
    }
    out
}

pub fn augment_image(img: &ImageBuffer, rng: &mut Rng) -> ImageBuffer {
    let p = sample_augment(img, rng);
    apply_augment(img, p)
}

/// Top-left patch coordinates of the masked blocks, uniform over positions
/// where a block fits. Blocks may overlap.
pub fn sample_mask_anchors(grid: (usize, usize), rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
    let (gw, gh) = grid;
    if gw < MASK_BLOCK || gh < MASK_BLOCK {
        return Err(Error::Shape(format!(
            "patch grid {gw}x{gh} is smaller than the {MASK_BLOCK}x{MASK_BLOCK} mask block"
        )));
    }
    Ok((0..MASK_BLOCKS)
        .map(|_| {
            (
                rng.random_range(0..=gw - MASK_BLOCK),
                rng.random_range(0..=gh - MASK_BLOCK),
            )
        })
        .collect())
}

pub fn mask_with_anchors(img: &ImageBuffer, patch: usize, anchors: &[(usize, usize)]) -> ImageBuffer {
    let mut out = img.clone();
    for &(ax, ay) in anchors {
        for y in ay * patch..(ay + MASK_BLOCK) * patch {
            for x in ax * patch..(ax + MASK_BLOCK) * patch {
                out.set(x, y, [0.0; 3]);
            }
        }
    }
    out
}

/// Zeroes three randomly placed 3x3-patch blocks.
pub fn mask_patches(img: &ImageBuffer, patch: usize, rng: &mut Rng) -> Result<ImageBuffer> {
    let grid = img.check_patch_grid(patch)?;
    let anchors = sample_mask_anchors(grid, rng)?;
    Ok(mask_with_anchors(img, patch, &anchors))
}
