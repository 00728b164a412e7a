//! Synthetic long-tailed terrain, tiling, block-level splits and minority
//! upsampling.
//!
//! The generator paints multi-octave value-noise terrain with rocks, roads
//! and modern roofs as distractors, then drops small walled compounds (closed
//! polygonal outlines with their own texture) into a chosen set of tiles.
//! The structure mask is the ground truth for every downstream label.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::{rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    /// Manifest spelling.
    pub fn code(self) -> &'static str {
        match self {
            Label::Positive => "pos",
            Label::Negative => "neg",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    Unlabeled,
    /// Tiled but not yet assigned.
    Unsplit,
}

impl Split {
    pub const LABELED: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unlabeled => "unlabeled",
            Split::Unsplit => "unsplit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Split::Train, Split::Val, Split::Test, Split::Unlabeled, Split::Unsplit].into_iter().find(|x| x.name() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct SynthConfig {
    /// Side of the square canvas in pixels.
    pub canvas: usize,
    /// Tile side in pixels.
    pub tile: usize,
    /// Fraction of tiles that receive a structure, in `[0, 0.5]`.
    pub target_positive_ratio: f64,
    /// Structure extent range in pixels, `(min, max)`; `max < tile`.
    pub structure_size: (usize, usize),
    /// Seeds the terrain noise field independently of placements.
    pub texture_seed: u64,
    pub octaves: u32,
    /// Per-pixel grain amplitude on the `[0, 1]` color scale.
    pub noise_amplitude: f64,
    /// Blend of wall color over local terrain, `(0, 1]`.
    pub structure_contrast: f64,
    /// Expected rock blobs per tile.
    pub rock_rate: f64,
    /// Expected modern filled roofs per tile.
    pub roof_rate: f64,
    /// Roads crossing the canvas.
    pub roads: usize,
    /// Fraction of tiles blanked as missing data.
    pub defect_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            canvas: 2048,
            tile: 64,
            target_positive_ratio: 0.01,
            structure_size: (14, 30),
            texture_seed: 0,
            octaves: 5,
            noise_amplitude: 0.05,
            structure_contrast: 0.45,
            rock_rate: 1.5,
            roof_rate: 0.03,
            roads: 3,
            defect_fraction: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile < 8 {
            return Err(Error::Config(format!("tile side must be ≥ 8, got {}", self.tile)));
        }
        if self.canvas < self.tile {
            return Err(Error::Config(format!(
                "canvas {} too small to hold one {}-pixel tile",
                self.canvas, self.tile
            )));
        }
        if !(0.0..=0.5).contains(&self.target_positive_ratio) {
            return Err(Error::Config("target positive ratio must lie in [0, 0.5]".into()));
        }
        let (lo, hi) = self.structure_size;
        if lo < 4 || lo > hi || hi + 2 >= self.tile {
            return Err(Error::Config(format!(
                "structure size range ({lo}, {hi}) must satisfy 4 ≤ min ≤ max < tile − 2"
            )));
        }
        if self.octaves == 0 {
            return Err(Error::Config("at least one noise octave is required".into()));
        }
        if !(self.structure_contrast > 0.0 && self.structure_contrast <= 1.0) {
            return Err(Error::Config("structure contrast must lie in (0, 1]".into()));
        }
        if !(0.0..0.5).contains(&self.defect_fraction) {
            return Err(Error::Config("defect fraction must lie in [0, 0.5)".into()));
        }
        Ok(())
    }

    pub fn tiles_per_side(&self) -> usize {
        self.canvas / self.tile
    }
}

/// RGB raster, 8 bits per channel, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// A structure's footprint, recorded at placement time.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Placement {
    pub tile_row: usize,
    pub tile_col: usize,
    /// Inclusive-exclusive pixel bounds `(x0, y0, x1, y1)`.
    pub bbox: (usize, usize, usize, usize),
    pub mask_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub raster: Raster,
    /// 1 where a structure covers the pixel.
    pub mask: Vec<u8>,
    pub placements: Vec<Placement>,
    /// Tiles blanked as missing data, `(row, col)`.
    pub defects: Vec<(usize, usize)>,
}

fn mix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn lattice(seed: u64, octave: u32, x: i64, y: i64) -> f64 {
    let h = mix64(
        seed ^ mix64(octave as u64 + 1)
            ^ (x as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
            ^ (y as u64).wrapping_mul(0x1656_67B1_9E37_79F9),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, octave: u32, x: f64, y: f64) -> f64 {
    let (xf, yf) = (libm::floor(x), libm::floor(y));
    let (xi, yi) = (xf as i64, yf as i64);
    let (tx, ty) = (smooth(x - xf), smooth(y - yf));
    let a = lattice(seed, octave, xi, yi);
    let b = lattice(seed, octave, xi + 1, yi);
    let c = lattice(seed, octave, xi, yi + 1);
    let d = lattice(seed, octave, xi + 1, yi + 1);
    let top = a + (b - a) * tx;
    let bot = c + (d - c) * tx;
    top + (bot - top) * ty
}

/// Fractal sum of `octaves` value-noise layers, normalized to `[0, 1]`.
fn fbm(seed: u64, x: f64, y: f64, period: f64, octaves: u32) -> f64 {
    let (mut amp, mut total, mut norm, mut p) = (1.0, 0.0, 0.0, period);
    for o in 0..octaves {
        total += amp * value_noise(seed, o, x / p, y / p);
        norm += amp;
        amp *= 0.5;
        p *= 0.5;
    }
    total / norm
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

const SOIL: [f64; 3] = [0.62, 0.52, 0.40];
const ROCK: [f64; 3] = [0.50, 0.47, 0.45];
const GRASS: [f64; 3] = [0.40, 0.45, 0.28];
const STONE: [f64; 3] = [0.80, 0.77, 0.71];
const ROOF: [f64; 3] = [0.86, 0.86, 0.88];

struct Canvas {
    side: usize,
    color: Vec<[f64; 3]>,
    mask: Vec<u8>,
}

impl Canvas {
    fn at(&mut self, x: usize, y: usize) -> &mut [f64; 3] {
        &mut self.color[y * self.side + x]
    }
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
    libm::sqrt(qx * qx + qy * qy)
}

fn inside(poly: &[(f64, f64)], px: f64, py: f64) -> bool {
    let mut odd = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a.1 > py) != (b.1 > py) && px < a.0 + (py - a.1) * (b.0 - a.0) / (b.1 - a.1) {
            odd = !odd;
        }
    }
    odd
}

/// Rectangular rooms, rotated and jittered, chained along one axis.
fn compound<R: Rng + ?Sized>(size: f64, rng: &mut R) -> Vec<Vec<(f64, f64)>> {
    let rooms = rng.random_range(1..=3usize);
    let theta = rng.random_range(0.0..core::f64::consts::FRAC_PI_2);
    let (c, s) = (libm::cos(theta), libm::sin(theta));
    let span = size / rooms as f64;
    let depth = size * rng.random_range(0.45..0.9);
    let mut out = Vec::with_capacity(rooms);
    for r in 0..rooms {
        let x0 = r as f64 * span - size / 2.0;
        let corners = [(x0, -depth / 2.0), (x0 + span, -depth / 2.0), (x0 + span, depth / 2.0), (x0, depth / 2.0)];
        out.push(
            corners
                .iter()
                .map(|&(x, y)| {
                    let (x, y) = (x + rng.random_range(-0.6..0.6), y + rng.random_range(-0.6..0.6));
                    (x * c - y * s, x * s + y * c)
                })
                .collect(),
        );
    }
    out
}

/// Draws one compound centered inside tile `(row, col)`; returns its
/// placement.
fn draw_structure<R: Rng + ?Sized>(
    canvas: &mut Canvas,
    cfg: &SynthConfig,
    row: usize,
    col: usize,
    rng: &mut R,
) -> Placement {
    let t = cfg.tile as f64;
    let mut size = rng.random_range(cfg.structure_size.0 as f64..=cfg.structure_size.1 as f64);
    let (polys, (minx, miny, maxx, maxy)) = loop {
        let polys = compound(size, rng);
        let pts = polys.iter().flatten();
        let minx = pts.clone().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let maxx = pts.clone().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let miny = pts.clone().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let maxy = pts.map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        if maxx - minx < t - 4.0 && maxy - miny < t - 4.0 {
            break (polys, (minx, miny, maxx, maxy));
        }
        size *= 0.85;
    };
    // translate so the bounding box lies strictly inside the tile
    let ox = (col as f64) * t + 2.0 - minx + rng.random_range(0.0..=(t - 4.0 - (maxx - minx)));
    let oy = (row as f64) * t + 2.0 - miny + rng.random_range(0.0..=(t - 4.0 - (maxy - miny)));
    let polys: Vec<Vec<(f64, f64)>> =
        polys.into_iter().map(|p| p.into_iter().map(|(x, y)| (x + ox, y + oy)).collect()).collect();
    let half_wall = rng.random_range(0.55..0.95);
    let x0 = libm::floor(minx + ox) as usize;
    let y0 = libm::floor(miny + oy) as usize;
    let x1 = (libm::ceil(maxx + ox) as usize + 1).min((col + 1) * cfg.tile);
    let y1 = (libm::ceil(maxy + oy) as usize + 1).min((row + 1) * cfg.tile);
    let mut count = 0;
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let wall = polys
                .iter()
                .any(|p| (0..p.len()).any(|i| segment_distance(px, py, p[i], p[(i + 1) % p.len()]) <= half_wall));
            let interior = !wall && polys.iter().any(|p| inside(p, px, py));
            if !(wall || interior) {
                continue;
            }
            let k = cfg.structure_contrast;
            let grain = rng.random_range(-1.0..1.0) * cfg.noise_amplitude;
            let here = *canvas.at(x, y);
            *canvas.at(x, y) = if wall {
                let c = lerp3(here, STONE, k);
                [c[0] + grain, c[1] + grain, c[2] + grain]
            } else {
                // rubble-strewn, slightly shaded floor
                let rubble = rng.random_range(-2.0..2.0) * cfg.noise_amplitude * k;
                let c = lerp3(here, [here[0] * 0.82, here[1] * 0.82, here[2] * 0.84], k);
                [c[0] + rubble, c[1] + rubble, c[2] + rubble]
            };
            canvas.mask[y * canvas.side + x] = 1;
            count += 1;
        }
    }
    Placement { tile_row: row, tile_col: col, bbox: (x0, y0, x1, y1), mask_pixels: count }
}

fn draw_rock<R: Rng + ?Sized>(canvas: &mut Canvas, cx: f64, cy: f64, rng: &mut R) {
    let rx = rng.random_range(1.5..5.0);
    let ry = rx * rng.random_range(0.5..1.2);
    let shade = if rng.random_bool(0.5) { rng.random_range(0.65..0.85) } else { rng.random_range(1.1..1.3) };
    let side = canvas.side as f64;
    let (x0, x1) = ((cx - rx).max(0.0) as usize, ((cx + rx + 1.0).min(side)) as usize);
    let (y0, y1) = ((cy - ry).max(0.0) as usize, ((cy + ry + 1.0).min(side)) as usize);
    for y in y0..y1 {
        for x in x0..x1 {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
            if dx * dx + dy * dy <= 1.0 {
                let c = canvas.at(x, y);
                c.iter_mut().for_each(|v| *v *= shade);
            }
        }
    }
}

fn draw_roof<R: Rng + ?Sized>(canvas: &mut Canvas, cx: f64, cy: f64, rng: &mut R) {
    let (w, h) = (rng.random_range(3.0..8.0), rng.random_range(3.0..8.0));
    let side = canvas.side as f64;
    let (x0, x1) = ((cx - w / 2.0).max(0.0) as usize, ((cx + w / 2.0).min(side)) as usize);
    let (y0, y1) = ((cy - h / 2.0).max(0.0) as usize, ((cy + h / 2.0).min(side)) as usize);
    for y in y0..y1 {
        for x in x0..x1 {
            *canvas.at(x, y) = ROOF;
        }
    }
}

fn draw_road<R: Rng + ?Sized>(canvas: &mut Canvas, rng: &mut R) {
    let side = canvas.side as f64;
    let a = (rng.random_range(0.0..side), 0.0);
    let b = (rng.random_range(0.0..side), side);
    let (a, b) = if rng.random_bool(0.5) { (a, b) } else { ((a.1, a.0), (b.1, b.0)) };
    let n = canvas.side;
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let steps = libm::ceil(libm::sqrt(dx * dx + dy * dy)) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let (x, y) = (a.0 + dx * t, a.1 + dy * t);
        for oy in -1i64..=1 {
            for ox in -1i64..=1 {
                let (xx, yy) = (x as i64 + ox, y as i64 + oy);
                if xx >= 0 && yy >= 0 && (xx as usize) < n && (yy as usize) < n {
                    let c = canvas.at(xx as usize, yy as usize);
                    *c = lerp3(*c, [0.74, 0.68, 0.58], 0.6);
                }
            }
        }
    }
}

/// Paints the terrain and places structures so that
/// `round(ratio × tiles)` tiles each hold one compound.
pub fn generate_synthetic_region(cfg: &SynthConfig, seed: u64) -> Result<Region> {
    cfg.validate()?;
    let per_side = cfg.tiles_per_side();
    let side = per_side * cfg.tile;
    let n_tiles = per_side * per_side;
    let mut canvas = Canvas { side, color: vec![[0.0; 3]; side * side], mask: vec![0; side * side] };

    let period = (cfg.tile * 2) as f64;
    let tex = cfg.texture_seed;
    let mut grain_rng = rng::substream(seed, 1);
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64, y as f64);
            let elev = fbm(tex, fx, fy, period, cfg.octaves);
            let moist = fbm(mix64(tex ^ 0xA5A5), fx, fy, period * 2.0, cfg.octaves.min(3));
            let t = smooth(((elev - 0.35) / 0.3).clamp(0.0, 1.0));
            let mut c = lerp3(SOIL, ROCK, t);
            c = lerp3(c, GRASS, ((moist - 0.55) * 2.5).clamp(0.0, 0.7));
            let shade = 0.85 + 0.3 * (elev - 0.5);
            let g = grain_rng.random_range(-1.0..1.0) * cfg.noise_amplitude;
            *canvas.at(x, y) = [c[0] * shade + g, c[1] * shade + g, c[2] * shade + g];
        }
    }

    let mut place_rng = rng::substream(seed, 2);
    for _ in 0..cfg.roads {
        draw_road(&mut canvas, &mut place_rng);
    }
    let mut distractor_rng = rng::substream(seed, 3);
    let rocks = libm::round(cfg.rock_rate * n_tiles as f64) as usize;
    for _ in 0..rocks {
        let (cx, cy) = (distractor_rng.random_range(0.0..side as f64), distractor_rng.random_range(0.0..side as f64));
        draw_rock(&mut canvas, cx, cy, &mut distractor_rng);
    }
    let roofs = libm::round(cfg.roof_rate * n_tiles as f64) as usize;
    for _ in 0..roofs {
        let (cx, cy) = (distractor_rng.random_range(0.0..side as f64), distractor_rng.random_range(0.0..side as f64));
        draw_roof(&mut canvas, cx, cy, &mut distractor_rng);
    }

    let n_defect = libm::round(cfg.defect_fraction * n_tiles as f64) as usize;
    let n_struct = libm::round(cfg.target_positive_ratio * n_tiles as f64) as usize;
    let chosen = index::sample(&mut place_rng, n_tiles, (n_struct + n_defect).min(n_tiles));
    let chosen: Vec<usize> = chosen.into_iter().collect();
    let (struct_tiles, defect_tiles) = chosen.split_at(n_struct.min(chosen.len()));
    let mut struct_tiles = struct_tiles.to_vec();
    struct_tiles.sort_unstable();
    let mut placements = Vec::with_capacity(struct_tiles.len());
    for &t in &struct_tiles {
        let p = draw_structure(&mut canvas, cfg, t / per_side, t % per_side, &mut place_rng);
        placements.push(p);
    }
    let mut defects: Vec<(usize, usize)> = defect_tiles.iter().map(|&t| (t / per_side, t % per_side)).collect();
    defects.sort_unstable();

    let mut pixels: Vec<u8> =
        canvas.color.iter().flat_map(|c| c.map(|v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8)).collect();
    for &(r, c) in &defects {
        for y in r * cfg.tile..(r + 1) * cfg.tile {
            let row = &mut pixels[(y * side + c * cfg.tile) * 3..(y * side + (c + 1) * cfg.tile) * 3];
            row.iter_mut().for_each(|p| *p = 0);
        }
    }
    Ok(Region { raster: Raster { width: side, height: side, pixels }, mask: canvas.mask, placements, defects })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TileOptions {
    pub tile: usize,
    /// Minimum structure pixels for a positive tile.
    pub threshold: usize,
    /// Side of a spatial block, in tiles.
    pub block_side: usize,
}

impl Default for TileOptions {
    fn default() -> Self {
        Self { tile: 64, threshold: 1, block_side: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tile {
    pub id: String,
    pub row: usize,
    pub col: usize,
    pub block_id: u32,
    /// `tile×tile×3`.
    pub pixels: Vec<u8>,
    pub truth: Label,
    pub mask_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TileSet {
    pub tile: usize,
    pub grid: (usize, usize),
    pub tiles: Vec<Tile>,
    /// All-zero tiles dropped as missing data.
    pub defective: usize,
}

pub fn tile_id(row: usize, col: usize) -> String {
    format!("r{row:04}c{col:04}")
}

/// Cuts `raster` into non-overlapping tiles (excess cropped), labels each by
/// its mask coverage and drops all-zero tiles.
pub fn tile_region(raster: &Raster, mask: &[u8], opts: &TileOptions) -> Result<TileSet> {
    if raster.width == 0 || raster.height == 0 || raster.pixels.is_empty() {
        return Err(Error::Empty("raster"));
    }
    if raster.pixels.len() != raster.width * raster.height * 3 || mask.len() != raster.width * raster.height {
        return Err(Error::Shape("raster, mask and dimensions disagree".into()));
    }
    if opts.tile == 0 || opts.block_side == 0 {
        return Err(Error::Config("tile and block sides must be positive".into()));
    }
    let t = opts.tile;
    let (rows, cols) = (raster.height / t, raster.width / t);
    if rows == 0 || cols == 0 {
        return Err(Error::Empty("raster smaller than one tile"));
    }
    let blocks_per_row = cols.div_ceil(opts.block_side);
    let mut tiles = Vec::with_capacity(rows * cols);
    let mut defective = 0;
    for r in 0..rows {
        for c in 0..cols {
            let mut pixels = Vec::with_capacity(t * t * 3);
            let mut covered = 0;
            for y in r * t..(r + 1) * t {
                let start = y * raster.width + c * t;
                pixels.extend_from_slice(&raster.pixels[start * 3..(start + t) * 3]);
                covered += mask[start..start + t].iter().filter(|&&m| m != 0).count();
            }
            if pixels.iter().all(|&p| p == 0) {
                defective += 1;
                continue;
            }
            let block = (r / opts.block_side) * blocks_per_row + c / opts.block_side;
            tiles.push(Tile {
                id: tile_id(r, c),
                row: r,
                col: c,
                block_id: block as u32,
                pixels,
                truth: if covered >= opts.threshold.max(1) { Label::Positive } else { Label::Negative },
                mask_pixels: covered,
            });
        }
    }
    Ok(TileSet { tile: t, grid: (rows, cols), tiles, defective })
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ManifestEntry {
    pub tile_id: String,
    /// Relative to the dataset root.
    pub path: String,
    pub block_id: u32,
    pub label: Option<Label>,
    pub split: Split,
}

pub fn tile_path(split: Split, tile_id: &str) -> String {
    format!("{}/{tile_id}.png", split.name())
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TileDataset {
    pub entries: Vec<ManifestEntry>,
}

impl TileDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == Some(label)).count()
    }

    /// Positives per negative, when both are present.
    pub fn class_ratio(&self) -> Option<f64> {
        let (p, n) = (self.count(Label::Positive), self.count(Label::Negative));
        (n > 0).then(|| p as f64 / n as f64)
    }

    pub fn block_ids(&self) -> alloc::collections::BTreeSet<u32> {
        self.entries.iter().map(|e| e.block_id).collect()
    }

    pub fn labels(&self) -> Option<Vec<bool>> {
        self.entries.iter().map(|e| e.label.map(Label::is_positive)).collect()
    }
}

impl TileSet {
    /// Every tile with its ground-truth label, not yet split.
    pub fn dataset(&self) -> TileDataset {
        TileDataset {
            entries: self
                .tiles
                .iter()
                .map(|t| ManifestEntry {
                    tile_id: t.id.clone(),
                    path: tile_path(Split::Unsplit, &t.id),
                    block_id: t.block_id,
                    label: Some(t.truth),
                    split: Split::Unsplit,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct SplitConfig {
    /// `(train, val, test)`, summing to 1.
    pub fractions: (f64, f64, f64),
    /// Fraction of blocks that keep their labels; the rest form the
    /// unlabeled pool.
    pub labeled_fraction: f64,
    /// When set, this share of the labeled blocks is drawn from blocks known
    /// to contain a positive (purposive sampling of rare structures).
    pub positive_block_share: Option<f64>,
    pub seed: u64,
}

impl Default for SplitConfig {
    /// Table-style proportions of 4,465 / 675 / 690 labeled tiles.
    fn default() -> Self {
        Self {
            fractions: (4465.0 / 5830.0, 675.0 / 5830.0, 690.0 / 5830.0),
            labeled_fraction: 5830.0 / (5830.0 + 95358.0),
            positive_block_share: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitDatasets {
    pub train: TileDataset,
    pub val: TileDataset,
    pub test: TileDataset,
    pub unlabeled: TileDataset,
}

impl SplitDatasets {
    pub fn get(&self, split: Split) -> &TileDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
            _ => &self.unlabeled,
        }
    }

    /// One manifest holding every split.
    pub fn combined(&self) -> TileDataset {
        let mut entries = Vec::new();
        for s in [Split::Train, Split::Val, Split::Test, Split::Unlabeled] {
            entries.extend(self.get(s).entries.iter().cloned());
        }
        TileDataset { entries }
    }

    pub fn from_combined(ds: &TileDataset) -> Self {
        let pick = |s: Split| TileDataset { entries: ds.entries.iter().filter(|e| e.split == s).cloned().collect() };
        Self {
            train: pick(Split::Train),
            val: pick(Split::Val),
            test: pick(Split::Test),
            unlabeled: pick(Split::Unlabeled),
        }
    }
}

/// Assigns whole spatial blocks to splits: first the labeled/unlabeled
/// partition, then train/val/test over the labeled blocks with positive-
/// bearing blocks spread proportionally.
pub fn split_dataset(ds: &TileDataset, cfg: &SplitConfig) -> Result<SplitDatasets> {
    let (a, b, c) = cfg.fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions ({a}, {b}, {c}) must sum to 1")));
    }
    if !(cfg.labeled_fraction > 0.0 && cfg.labeled_fraction <= 1.0) {
        return Err(Error::Config("labeled fraction must lie in (0, 1]".into()));
    }
    let mut blocks: BTreeMap<u32, bool> = BTreeMap::new();
    for e in &ds.entries {
        *blocks.entry(e.block_id).or_default() |= e.label == Some(Label::Positive);
    }
    let mut rng = rng::substream(cfg.seed, 0x5b17);
    let mut ids: Vec<u32> = blocks.keys().copied().collect();
    ids.shuffle(&mut rng);

    let n_labeled = (libm::round(cfg.labeled_fraction * ids.len() as f64) as usize).clamp(1, ids.len());
    let wanted = [a, b, c].iter().filter(|&&f| f > 0.0).count();
    if n_labeled < wanted {
        return Err(Error::TooFewBlocks { blocks: n_labeled, splits: wanted });
    }
    let (pos_blocks, other_blocks): (Vec<u32>, Vec<u32>) = ids.iter().partition(|id| blocks[id]);
    let labeled: Vec<u32> = match cfg.positive_block_share {
        Some(share) => {
            let n_pos = (libm::round(share.clamp(0.0, 1.0) * n_labeled as f64) as usize).min(pos_blocks.len());
            let n_other = (n_labeled - n_pos).min(other_blocks.len());
            let mut l: Vec<u32> = pos_blocks[..n_pos].to_vec();
            l.extend_from_slice(&other_blocks[..n_other]);
            l
        }
        None => ids[..n_labeled].to_vec(),
    };
    // positive-bearing blocks first so the deficit rule spreads them evenly
    let mut ordered: Vec<u32> = labeled.iter().copied().filter(|id| blocks[id]).collect();
    ordered.extend(labeled.iter().copied().filter(|id| !blocks[id]));

    let n = ordered.len();
    let t_train = libm::round(a * n as f64) as usize;
    let t_val = (libm::round((a + b) * n as f64) as usize).saturating_sub(t_train);
    let targets = [t_train, t_val, n - t_train - t_val];
    let mut assigned = [0usize; 3];
    let mut split_of: BTreeMap<u32, Split> = BTreeMap::new();
    for id in ordered {
        let mut best = None;
        for s in 0..3 {
            if assigned[s] >= targets[s] {
                continue;
            }
            let deficit = (targets[s] - assigned[s]) as f64 / targets[s] as f64;
            if best.is_none_or(|(_, d)| deficit > d) {
                best = Some((s, deficit));
            }
        }
        let s = best.map(|(s, _)| s).expect("targets cover every labeled block");
        assigned[s] += 1;
        split_of.insert(id, Split::LABELED[s]);
    }

    let mut out = SplitDatasets {
        train: TileDataset::default(),
        val: TileDataset::default(),
        test: TileDataset::default(),
        unlabeled: TileDataset::default(),
    };
    for e in &ds.entries {
        let split = split_of.get(&e.block_id).copied().unwrap_or(Split::Unlabeled);
        let entry = ManifestEntry {
            tile_id: e.tile_id.clone(),
            path: tile_path(split, &e.tile_id),
            block_id: e.block_id,
            label: if split == Split::Unlabeled { None } else { e.label },
            split,
        };
        match split {
            Split::Train => out.train.entries.push(entry),
            Split::Val => out.val.entries.push(entry),
            Split::Test => out.test.entries.push(entry),
            _ => out.unlabeled.entries.push(entry),
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Upsample {
    /// Every positive repeated this many times.
    Factor(usize),
    /// Positives repeated until they match the negative count exactly.
    Balance,
}

/// Replicates positive manifest entries; negatives are untouched and order
/// is preserved (copies of a positive sit next to each other).
pub fn upsample_minority(train: &TileDataset, mode: Upsample) -> Result<TileDataset> {
    let positives: Vec<usize> = (0..train.len()).filter(|&i| train.entries[i].label == Some(Label::Positive)).collect();
    if positives.is_empty() {
        return Err(Error::NoPositives);
    }
    let p = positives.len();
    let copies = |rank: usize| -> usize {
        match mode {
            Upsample::Factor(f) => f,
            Upsample::Balance => {
                let target = train.count(Label::Negative).max(p);
                target / p + usize::from(rank < target % p)
            }
        }
    };
    if let Upsample::Factor(0) = mode {
        return Err(Error::Config("upsampling factor must be ≥ 1".into()));
    }
    let mut entries = Vec::with_capacity(train.len());
    let mut rank = 0;
    for e in &train.entries {
        if e.label == Some(Label::Positive) {
            for _ in 0..copies(rank) {
                entries.push(e.clone());
            }
            rank += 1;
        } else {
            entries.push(e.clone());
        }
    }
    Ok(TileDataset { entries })
}
