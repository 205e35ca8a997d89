//! Glyph bitmaps and scene rasterization.
//!
//! Scenes are 16x16 single-channel grids split into a 4x4 lattice of
//! 4x4 slots; each object occupies one slot. Pixel values are multiples of
//! 1/64, so they survive a decimal JSON round trip exactly.

use rand::Rng;

use crate::autograd::Tensor;

pub const IMAGE_SIDE: usize = 16;
pub const GLYPH_SIDE: usize = 4;
pub const SLOTS_PER_SIDE: usize = IMAGE_SIDE / GLYPH_SIDE;
pub const N_SLOTS: usize = SLOTS_PER_SIDE * SLOTS_PER_SIDE;

/// Background pixels are `k / 64` with `k` drawn from `0..=BACKGROUND_LEVELS`.
pub const BACKGROUND_LEVELS: u32 = 8;

/// Whether pixel `(r, c)` of glyph `g` is lit.
pub fn glyph_pixel(g: usize, r: usize, c: usize) -> bool {
    let mid = |i: usize| i == 1 || i == 2;
    match g {
        0 => true,
        1 => r == 0 || r == 3 || c == 0 || c == 3,
        2 => mid(r) || mid(c),
        3 => r == c || r + c == 3,
        4 => mid(r),
        5 => mid(c),
        6 => (r + c) % 2 == 0,
        7 => mid(r) && mid(c),
        _ => panic!("glyph index {g} out of range"),
    }
}

/// A glyph placed in a slot of the lattice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Placement {
    pub glyph: usize,
    pub slot: usize,
}

pub fn background<R: Rng + ?Sized>(rng: &mut R) -> Tensor {
    let data = (0..IMAGE_SIDE * IMAGE_SIDE).map(|_| rng.random_range(0..=BACKGROUND_LEVELS) as f64 / 64.0).collect();
    Tensor::new(IMAGE_SIDE, IMAGE_SIDE, data).expect("square canvas")
}

/// Draws the placements over a copy of `bg`; lit pixels are set to 1.
pub fn render(bg: &Tensor, placements: &[Placement]) -> Tensor {
    let mut img = bg.clone();
    for p in placements {
        let (r0, c0) = ((p.slot / SLOTS_PER_SIDE) * GLYPH_SIDE, (p.slot % SLOTS_PER_SIDE) * GLYPH_SIDE);
        for r in 0..GLYPH_SIDE {
            for c in 0..GLYPH_SIDE {
                if glyph_pixel(p.glyph, r, c) {
                    img.set(r0 + r, c0 + c, 1.0);
                }
            }
        }
    }
    img
}

/// Mirrors an image left to right.
pub fn hflip(img: &Tensor) -> Tensor {
    let (h, w) = img.shape();
    let mut out = img.clone();
    for r in 0..h {
        for c in 0..w {
            out.set(r, c, img.get(r, w - 1 - c));
        }
    }
    out
}
