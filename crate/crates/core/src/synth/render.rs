use rand::Rng as _;

use super::{Content, LatentFactors, Style};
use crate::image::ImageBuffer;
use crate::rng::Rng;

pub const STENCIL_SIZE: usize = 16;

const STAR: [&str; 16] = [
    ".......##.......",
    ".......##.......",
    "......####......",
    "......####......",
    ".....######.....",
    "################",
    ".##############.",
    "..############..",
    "...##########...",
    "....########....",
    "....########....",
    "...####..####...",
    "...###....###...",
    "..###......###..",
    "..##........##..",
    ".##..........##.",
];

const HEART: [&str; 16] = [
    "................",
    "..####....####..",
    ".######..######.",
    "################",
    "################",
    "################",
    "################",
    ".##############.",
    "..############..",
    "...##########...",
    "....########....",
    ".....######.....",
    "......####......",
    ".......##.......",
    "................",
    "................",
];

const DICE: [&str; 16] = [
    "################",
    "#..............#",
    "#.##........##.#",
    "#.##........##.#",
    "#..............#",
    "#..............#",
    "#......##......#",
    "#......##......#",
    "#..............#",
    "#..............#",
    "#..............#",
    "#.##........##.#",
    "#.##........##.#",
    "#..............#",
    "#..............#",
    "################",
];

const BOTTLE: [&str; 16] = [
    "......####......",
    "......####......",
    "......#..#......",
    "......#..#......",
    ".....##..##.....",
    "....##....##....",
    "...##......##...",
    "...#........#...",
    "...#.######.#...",
    "...#.######.#...",
    "...#.######.#...",
    "...#........#...",
    "...#........#...",
    "...#........#...",
    "...##########...",
    "................",
];

const WEAPON: [&str; 16] = [
    "..............##",
    ".............###",
    "............###.",
    "...........###..",
    "..........###...",
    ".........###....",
    "........###.....",
    ".......###......",
    "..#...###.......",
    "..##.###........",
    "...####.........",
    "....##..........",
    "...####.........",
    "..##..##........",
    ".##.............",
    "##..............",
];

fn stencil(content: Content) -> &'static [&'static str; 16] {
    match content {
        Content::Star => &STAR,
        Content::Heart => &HEART,
        Content::Dice => &DICE,
        Content::Bottle => &BOTTLE,
        Content::Weapon => &WEAPON,
    }
}

enum Texture {
    Flat,
    Checker,
    Glitter,
}

/// (background, glyph, accent) and texture overlay for each style.
fn palette(style: Style) -> ([[f32; 3]; 3], Texture) {
    match style {
        Style::Pastel => (
            [[1.0, 0.85, 0.9], [0.6, 0.8, 1.0], [1.0, 1.0, 0.7]],
            Texture::Glitter,
        ),
        Style::Primary => (
            [[0.95, 0.9, 0.2], [0.9, 0.1, 0.1], [0.1, 0.2, 0.9]],
            Texture::Flat,
        ),
        Style::Neon => (
            [[0.05, 0.0, 0.1], [1.0, 0.1, 0.9], [0.1, 1.0, 0.9]],
            Texture::Checker,
        ),
        Style::Grayscale => (
            [[0.7, 0.7, 0.7], [0.2, 0.2, 0.2], [0.45, 0.45, 0.45]],
            Texture::Flat,
        ),
        Style::Dark => (
            [[0.08, 0.05, 0.05], [0.55, 0.0, 0.05], [0.3, 0.22, 0.22]],
            Texture::Checker,
        ),
    }
}

fn jitter(rgb: [f32; 3], rng: &mut Rng) -> [f32; 3] {
    let mut out = rgb;
    for c in &mut out {
        *c = (*c + rng.random_range(-0.04f32..0.04)).clamp(0.0, 1.0);
    }
    out
}

/// Draws 2–4 copies of the content stencil in the style's palette and texture.
pub fn render_image(latent: &LatentFactors, size: usize, rng: &mut Rng) -> ImageBuffer {
    let (colors, texture) = palette(latent.style);
    let [bg, fg, accent] = colors.map(|c| jitter(c, rng));
    let mut img = ImageBuffer::filled(size, size, bg);

    let glyph = stencil(latent.content);
    for _ in 0..rng.random_range(2..=4) {
        let ox = rng.random_range(0..=size - STENCIL_SIZE);
        let oy = rng.random_range(0..=size - STENCIL_SIZE);
        for (dy, row) in glyph.iter().enumerate() {
            for (dx, ch) in row.bytes().enumerate() {
                if ch == b'#' {
                    img.set(ox + dx, oy + dy, fg);
                }
            }
        }
    }

    match texture {
        Texture::Flat => {}
        Texture::Checker => {
            for y in 0..size {
                for x in 0..size {
                    if ((x / 2) + (y / 2)) % 2 == 0 {
                        let p = img.get(x, y);
                        img.set(x, y, std::array::from_fn(|c| 0.75 * p[c] + 0.25 * accent[c]));
                    }
                }
            }
        }
        Texture::Glitter => {
            for y in 0..size {
                for x in 0..size {
                    if rng.random::<f64>() < 0.15 {
                        img.set(x, y, [1.0, 1.0, 1.0]);
                    }
                }
            }
        }
    }
    img
}
