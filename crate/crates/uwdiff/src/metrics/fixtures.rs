//! Deterministic test images for metric verification.
//!
//! Each image is generated from integer arithmetic only, so an independent
//! implementation (see `tools/oracle_gen.py`) reproduces it bit for bit
//! without worrying about transcendental-function rounding. The frozen
//! expected metric values live in `oracle_values.rs`.

use ndarray::Array3;

/// Integer recipe for one image: coefficients `[a, b, c, d, e, f, g, h]`
/// plus a modulus and inversion flag. Pixel `(y, x, ch)` takes the value
///
/// ```text
/// raw = (a*x + b*y + c*x*y + d*(x*x % 7919) + e*(y*y % 104729)
///        + f*ch*ch + g*(x+y)*ch + h) % m
/// v   = raw / (m - 1)          (or (m-1-raw)/(m-1) when inverted)
/// ```
#[derive(Debug, Clone, Copy)]
pub struct Recipe {
    pub coeffs: [i64; 8],
    pub modulus: i64,
    pub invert: bool,
}

pub const FIXTURE_SIDE: usize = 32;

/// Ten (pred, ref) recipes covering identity, uniform shift, inversion,
/// smooth gradients, and textured or chroma-heavy content.
pub const FIXTURE_PAIRS: [(Recipe, Recipe); 10] = [
    // identical pair
    (
        Recipe { coeffs: [3, 5, 1, 2, 1, 7, 11, 0], modulus: 251, invert: false },
        Recipe { coeffs: [3, 5, 1, 2, 1, 7, 11, 0], modulus: 251, invert: false },
    ),
    // uniform 118/255 vs uniform 2/5 (difference exactly 16/255)
    (
        Recipe { coeffs: [0, 0, 0, 0, 0, 0, 0, 118], modulus: 256, invert: false },
        Recipe { coeffs: [0, 0, 0, 0, 0, 0, 0, 2], modulus: 6, invert: false },
    ),
    // textured vs its exact inversion
    (
        Recipe { coeffs: [7, 3, 2, 1, 2, 5, 3, 4], modulus: 199, invert: true },
        Recipe { coeffs: [7, 3, 2, 1, 2, 5, 3, 4], modulus: 199, invert: false },
    ),
    // smooth gradients, slightly different slopes
    (
        Recipe { coeffs: [5, 3, 0, 0, 0, 8, 2, 1], modulus: 131, invert: false },
        Recipe { coeffs: [4, 4, 0, 0, 0, 9, 0, 3], modulus: 131, invert: false },
    ),
    // dense texture
    (
        Recipe { coeffs: [12, 8, 3, 2, 1, 10, 7, 5], modulus: 241, invert: false },
        Recipe { coeffs: [13, 7, 3, 2, 1, 11, 5, 2], modulus: 239, invert: false },
    ),
    // chroma-heavy (large channel terms)
    (
        Recipe { coeffs: [3, 2, 1, 0, 0, 37, 19, 8], modulus: 203, invert: false },
        Recipe { coeffs: [2, 3, 1, 0, 0, 40, 21, 6], modulus: 201, invert: false },
    ),
    // sparse low-frequency content
    (
        Recipe { coeffs: [1, 1, 0, 1, 0, 2, 0, 9], modulus: 509, invert: false },
        Recipe { coeffs: [1, 2, 0, 1, 0, 3, 0, 7], modulus: 521, invert: false },
    ),
    // strong texture vs near-copy
    (
        Recipe { coeffs: [16, 18, 5, 3, 2, 12, 31, 3], modulus: 257, invert: false },
        Recipe { coeffs: [17, 19, 5, 3, 2, 13, 29, 1], modulus: 253, invert: false },
    ),
    // inverted variant against a plain one
    (
        Recipe { coeffs: [2, 9, 1, 1, 1, 6, 13, 11], modulus: 127, invert: true },
        Recipe { coeffs: [9, 2, 1, 1, 1, 6, 13, 11], modulus: 127, invert: false },
    ),
    // mixed mid-frequency
    (
        Recipe { coeffs: [11, 6, 2, 4, 3, 23, 15, 12], modulus: 222, invert: false },
        Recipe { coeffs: [6, 11, 2, 4, 3, 21, 17, 10], modulus: 218, invert: false },
    ),
];

/// Renders a recipe to `[side, side, 3]` in `[0, 1]`.
pub fn render(recipe: &Recipe, side: usize) -> Array3<f64> {
    let [a, b, c, d, e, f, g, h] = recipe.coeffs;
    let m = recipe.modulus;
    let mut out = Array3::<f64>::zeros((side, side, 3));
    for y in 0..side {
        for x in 0..side {
            for ch in 0..3 {
                let (xi, yi, ci) = (x as i64, y as i64, ch as i64);
                let raw = (a * xi
                    + b * yi
                    + c * xi * yi
                    + d * ((xi * xi) % 7919)
                    + e * ((yi * yi) % 104729)
                    + f * ci * ci
                    + g * (xi + yi) * ci
                    + h)
                    % m;
                let raw = if recipe.invert { m - 1 - raw } else { raw };
                out[[y, x, ch]] = raw as f64 / (m - 1) as f64;
            }
        }
    }
    out
}

/// All ten (pred, ref) fixture pairs at the standard side.
pub fn fixture_pairs() -> Vec<(Array3<f64>, Array3<f64>)> {
    FIXTURE_PAIRS
        .iter()
        .map(|(p, r)| (render(p, FIXTURE_SIDE), render(r, FIXTURE_SIDE)))
        .collect()
}
