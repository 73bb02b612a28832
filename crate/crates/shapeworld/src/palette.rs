//! Attribute sets and the colour table shared by renderer and detector.

use instdiff_core::layout::{CATEGORIES, COLORS, TEXTURES};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Color(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Texture(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Category(pub usize);

pub const SOLID: Texture = Texture(0);
pub const STRIPED: Texture = Texture(1);
pub const DOTTED: Texture = Texture(2);
pub const CHECKER: Texture = Texture(3);

pub const CIRCLE: Category = Category(0);
pub const SQUARE: Category = Category(1);
pub const TRIANGLE: Category = Category(2);
pub const STAR: Category = Category(3);

impl Color {
    pub fn name(self) -> &'static str {
        COLORS[self.0]
    }
}

impl Texture {
    pub fn name(self) -> &'static str {
        TEXTURES[self.0]
    }
}

impl Category {
    pub fn name(self) -> &'static str {
        CATEGORIES[self.0]
    }
}

pub const NUM_COLORS: usize = 8;
pub const NUM_TEXTURES: usize = 4;
pub const NUM_CATEGORIES: usize = 4;

/// Base shade per colour, in vocabulary order.
pub const BASE: [[u8; 3]; NUM_COLORS] = [
    [20, 20, 20],
    [240, 240, 240],
    [220, 30, 30],
    [30, 180, 50],
    [240, 220, 30],
    [30, 60, 220],
    [250, 140, 200],
    [140, 50, 190],
];

/// Second shade used by the patterned textures.
pub const ALT: [[u8; 3]; NUM_COLORS] = [
    [80, 80, 80],
    [180, 180, 180],
    [140, 10, 10],
    [10, 100, 20],
    [160, 140, 10],
    [10, 20, 130],
    [200, 80, 150],
    [80, 20, 110],
];

/// Not in the palette, so it never labels as a shape.
pub const BACKGROUND: [u8; 3] = [120, 140, 130];

pub fn shade(c: Color, alt: bool) -> [u8; 3] {
    if alt {
        ALT[c.0]
    } else {
        BASE[c.0]
    }
}

/// Whether texture `t` paints image pixel `(x, y)` in the second shade.
/// Patterns are anchored to the image grid.
pub fn texture_alt(t: Texture, x: usize, y: usize) -> bool {
    match t.0 {
        0 => false,
        1 => y % 4 >= 2,
        2 => x % 4 < 2 && y % 4 < 2,
        _ => ((x / 2) + (y / 2)) % 2 == 1,
    }
}

/// Nearest palette entry: `None` for background, else colour and shade.
pub fn nearest(rgb: [u8; 3]) -> Option<(Color, bool)> {
    let d = |a: [u8; 3]| -> i32 { (0..3).map(|i| (a[i] as i32 - rgb[i] as i32).pow(2)).sum() };
    let mut best = (d(BACKGROUND), None);
    for c in 0..NUM_COLORS {
        for alt in [false, true] {
            let v = d(shade(Color(c), alt));
            if v < best.0 {
                best = (v, Some((Color(c), alt)));
            }
        }
    }
    best.1
}
