//! Raster helpers shared by the generator, loader and augmentation.

use alloc::vec;
use alloc::vec::Vec;

/// Bilinear resize of a channels-last float raster (half-pixel centers,
/// edge-clamped). Equal sizes reproduce the input exactly.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f32> {
    assert_eq!(src.len(), h * w * c);
    if oh == h && ow == w {
        return src.to_vec();
    }
    let axis = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f32) {
        let scale = n_in as f32 / n_out as f32;
        let s = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (s as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f32)
    };
    let xs: Vec<_> = (0..ow).map(|x| axis(x, ow, w)).collect();
    let mut out = vec![0.0f32; oh * ow * c];
    for y in 0..oh {
        let (y0, y1, fy) = axis(y, oh, h);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(y * ow + x) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Bilinear sample of the sub-rectangle `[x0, x0+cw) × [y0, y0+ch)` onto an
/// `oh×ow` grid.
#[allow(clippy::too_many_arguments)]
pub fn crop_resize(
    src: &[f32],
    h: usize,
    w: usize,
    c: usize,
    (x0, y0, cw, ch): (f32, f32, f32, f32),
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let mut out = vec![0.0f32; oh * ow * c];
    let sample = |pos: f32, n: usize| -> (usize, usize, f32) {
        let s = pos.clamp(0.0, (n - 1) as f32);
        let i0 = s as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f32)
    };
    for y in 0..oh {
        let sy = y0 + (y as f32 + 0.5) * ch / oh as f32 - 0.5;
        let (ya, yb, fy) = sample(sy, h);
        for x in 0..ow {
            let sx = x0 + (x as f32 + 0.5) * cw / ow as f32 - 0.5;
            let (xa, xb, fx) = sample(sx, w);
            for k in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + k];
                let top = p(ya, xa) * (1.0 - fx) + p(ya, xb) * fx;
                let bot = p(yb, xa) * (1.0 - fx) + p(yb, xb) * fx;
                out[(y * ow + x) * c + k] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// 8-bit pixels to `[0, 1]`.
pub fn to_unit(pixels: &[u8]) -> Vec<f32> {
    pixels.iter().map(|&p| p as f32 / 255.0).collect()
}
