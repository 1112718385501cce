//! Procedural mini-benchmark: parametric garments with known silhouettes,
//! palettes, logo stickers, placement boxes, and template captions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GarmentError, Result};
use crate::num::Scalar;
use crate::tensor::{BoxPx, ImageTensor, MaskTensor};

pub const IMG_H: usize = 64;
pub const IMG_W: usize = 80;
/// Background is white; any pixel with all channels >= this is background.
pub const BACKGROUND_MIN: f64 = 0.95;

/// Number of distinct silhouette shapes (3 classes x 6 variants).
pub const N_SILHOUETTES: usize = 18;
/// Number of palettes (12 flat fills + 8 stripe pairs).
pub const N_PALETTES: usize = 20;
/// Number of logo conditions (12 glyphs x 4 glyph colors).
pub const N_LOGOS: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GarmentClass {
    Top,
    Bottom,
    Dress,
}

impl GarmentClass {
    pub fn name(&self) -> &'static str {
        match self {
            GarmentClass::Top => "top",
            GarmentClass::Bottom => "bottom",
            GarmentClass::Dress => "dress",
        }
    }
}

/// Discrete condition ids; the unseen split recombines these triples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionIds {
    pub silhouette: usize,
    pub palette: usize,
    pub logo: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub rgb: [f64; 3],
    /// Fraction of garment pixels carrying this fill, measured on the
    /// rendered plain garment.
    pub mass: f64,
}

/// One synthetic record with every conditioning signal ground-truthed.
#[derive(Debug, Clone)]
pub struct GarmentSample<T> {
    pub sample_id: u64,
    /// Final garment with the logo sticker composited.
    pub image: ImageTensor<T>,
    /// The same garment without the logo (stage-I target, eval regions).
    pub plain: ImageTensor<T>,
    pub prompt: String,
    pub silhouette: ImageTensor<T>,
    pub color_ref: ImageTensor<T>,
    pub logo: ImageTensor<T>,
    pub mask: MaskTensor<T>,
    pub palette: Vec<PaletteEntry>,
    pub garment_class: GarmentClass,
    pub ids: ConditionIds,
}

// ---------------------------------------------------------------------------
// Color vocabulary
// ---------------------------------------------------------------------------

/// Named fills, placed at 8x8x8 histogram bin centers (k/8 + 1/16).
pub const COLOR_VOCAB: [(&str, [f64; 3]); 12] = [
    ("red", [0.9375, 0.0625, 0.0625]),
    ("green", [0.0625, 0.6875, 0.1875]),
    ("blue", [0.0625, 0.1875, 0.9375]),
    ("yellow", [0.9375, 0.8125, 0.0625]),
    ("orange", [0.9375, 0.4375, 0.0625]),
    ("purple", [0.5625, 0.0625, 0.8125]),
    ("cyan", [0.0625, 0.8125, 0.8125]),
    ("magenta", [0.9375, 0.0625, 0.6875]),
    ("teal", [0.0625, 0.4375, 0.4375]),
    ("pink", [0.9375, 0.5625, 0.6875]),
    ("brown", [0.5625, 0.3125, 0.0625]),
    ("navy", [0.0625, 0.0625, 0.4375]),
];

/// Stripe pairs by vocab index, majority fill first.
const STRIPE_PAIRS: [(usize, usize); 8] =
    [(0, 2), (3, 11), (1, 10), (6, 7), (4, 8), (5, 9), (2, 3), (0, 1)];

const GLYPH_COLORS: [[f64; 3]; 4] = [
    [0.0625, 0.0625, 0.4375], // navy
    [0.9375, 0.0625, 0.0625], // red
    [0.0625, 0.6875, 0.1875], // green
    [0.0625, 0.0625, 0.0625], // near-black
];

/// Fill colors (without masses) for palette id.
pub fn palette_colors(palette_id: usize) -> Vec<[f64; 3]> {
    if palette_id < 12 {
        vec![COLOR_VOCAB[palette_id].1]
    } else {
        let (a, b) = STRIPE_PAIRS[palette_id - 12];
        vec![COLOR_VOCAB[a].1, COLOR_VOCAB[b].1]
    }
}

fn palette_main_name(palette_id: usize) -> &'static str {
    if palette_id < 12 {
        COLOR_VOCAB[palette_id].0
    } else {
        COLOR_VOCAB[STRIPE_PAIRS[palette_id - 12].0].0
    }
}

// ---------------------------------------------------------------------------
// Garment geometry
// ---------------------------------------------------------------------------

/// Inclusion test for the garment body in unit coordinates (u right,
/// v down, both in [0,1]).
fn garment_hit(class: GarmentClass, variant: usize, u: f64, v: f64) -> bool {
    // Variant 0..5: three widths x two style variants.
    let scale = 0.82 + 0.09 * (variant % 3) as f64;
    let style = variant / 3;
    let cu = (u - 0.5) / scale;
    let cv = (v - 0.5) / scale;
    let (u, v) = (cu + 0.5, cv + 0.5);
    match class {
        GarmentClass::Top => {
            let torso = (0.30..=0.70).contains(&u) && (0.18..=0.88).contains(&v);
            let sleeve_len = if style == 0 { 0.52 } else { 0.34 };
            let sleeves = (0.10..=0.90).contains(&u)
                && (0.20..=0.20 + sleeve_len).contains(&v)
                && !(0.30..=0.70).contains(&u)
                && (u - 0.5).abs() <= 0.28 + 0.3 * (v - 0.12);
            torso || sleeves
        }
        GarmentClass::Bottom => {
            let waist = (0.28..=0.72).contains(&u) && (0.10..=0.34).contains(&v);
            let gap = if style == 0 { 0.045 } else { 0.08 };
            let leg_l = (0.28..=0.5 - gap).contains(&u) && (0.10..=0.92).contains(&v);
            let leg_r = (0.5 + gap..=0.72).contains(&u) && (0.10..=0.92).contains(&v);
            waist || leg_l || leg_r
        }
        GarmentClass::Dress => {
            let flare = if style == 0 { 0.30 } else { 0.22 };
            let half_w = 0.14 + flare * (v - 0.10).max(0.0);
            let body = (0.10..=0.90).contains(&v) && (u - 0.5).abs() <= half_w;
            let straps = (0.04..=0.12).contains(&v) && ((u - 0.38).abs() <= 0.035 || (u - 0.62).abs() <= 0.035);
            body || straps
        }
    }
}

fn silhouette_parts(sil_id: usize) -> (GarmentClass, usize) {
    let class = match sil_id / 6 {
        0 => GarmentClass::Top,
        1 => GarmentClass::Bottom,
        _ => GarmentClass::Dress,
    };
    (class, sil_id % 6)
}

/// Rasterized garment-body indicator on the full canvas.
fn garment_region(class: GarmentClass, variant: usize) -> Vec<bool> {
    let mut region = vec![false; IMG_H * IMG_W];
    for y in 0..IMG_H {
        for x in 0..IMG_W {
            // The garment occupies a centered square viewport.
            let side = IMG_H as f64;
            let u = (x as f64 + 0.5 - (IMG_W as f64 - side) / 2.0) / side;
            let v = (y as f64 + 0.5) / side;
            if (0.0..=1.0).contains(&u) && garment_hit(class, variant, u, v) {
                region[y * IMG_W + x] = true;
            }
        }
    }
    region
}

// ---------------------------------------------------------------------------
// Glyphs
// ---------------------------------------------------------------------------

pub const GLYPH_NAMES: [&str; 12] = [
    "letter-t", "letter-h", "letter-x", "ring", "letter-a", "star", "triangle", "diamond",
    "plus", "arrow", "heart", "bolt",
];

/// Inclusion test for glyph `id` in unit coordinates.
fn glyph_hit(id: usize, u: f64, v: f64) -> bool {
    let in_box = (0.05..=0.95).contains(&u) && (0.05..=0.95).contains(&v);
    if !in_box {
        return false;
    }
    match id {
        0 => {
            // T
            ((0.12..=0.88).contains(&u) && (0.10..=0.30).contains(&v))
                || ((0.40..=0.60).contains(&u) && (0.10..=0.90).contains(&v))
        }
        1 => {
            // H
            ((0.14..=0.34).contains(&u) || (0.66..=0.86).contains(&u)) && (0.10..=0.90).contains(&v)
                || ((0.14..=0.86).contains(&u) && (0.42..=0.58).contains(&v))
        }
        2 => {
            // X
            let d1 = (u - v).abs() < 0.14;
            let d2 = (u + v - 1.0).abs() < 0.14;
            (0.12..=0.88).contains(&u) && (0.12..=0.88).contains(&v) && (d1 || d2)
        }
        3 => {
            // ring
            let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
            (0.22..=0.40).contains(&r)
        }
        4 => {
            // A
            let spread = 0.08 + 0.30 * (v - 0.10) / 0.80;
            let legs = (0.10..=0.90).contains(&v)
                && ((u - 0.5).abs() - spread).abs() < 0.09;
            let bar = (0.55..=0.72).contains(&v) && (u - 0.5).abs() <= 0.26;
            legs || bar
        }
        5 => {
            // five-point star
            let du = u - 0.5;
            let dv = v - 0.5;
            let r = (du * du + dv * dv).sqrt();
            let theta = dv.atan2(du) + std::f64::consts::PI;
            let sector = theta / (2.0 * std::f64::consts::PI / 10.0);
            let frac = sector.fract();
            let k = sector as usize % 2;
            let (r0, r1) = if k == 0 { (0.44, 0.18) } else { (0.18, 0.44) };
            r <= r0 + (r1 - r0) * frac
        }
        6 => {
            // triangle
            (0.15..=0.85).contains(&v) && (u - 0.5).abs() <= 0.42 * (v - 0.15) / 0.70
        }
        7 => (u - 0.5).abs() / 0.40 + (v - 0.5).abs() / 0.42 <= 1.0, // diamond
        8 => {
            // plus
            ((u - 0.5).abs() <= 0.14 && (0.10..=0.90).contains(&v))
                || ((v - 0.5).abs() <= 0.14 && (0.10..=0.90).contains(&u))
        }
        9 => {
            // right arrow
            let shaft = (0.10..=0.58).contains(&u) && (v - 0.5).abs() <= 0.13;
            let head = (0.58..=0.90).contains(&u) && (v - 0.5).abs() <= 0.36 * (0.90 - u) / 0.32;
            shaft || head
        }
        10 => {
            // heart: two discs + triangle
            let d1 = ((u - 0.34).powi(2) + (v - 0.34).powi(2)).sqrt() <= 0.19;
            let d2 = ((u - 0.66).powi(2) + (v - 0.34).powi(2)).sqrt() <= 0.19;
            let tri = (0.34..=0.88).contains(&v) && (u - 0.5).abs() <= 0.36 * (0.88 - v) / 0.54;
            d1 || d2 || tri
        }
        _ => {
            // lightning bolt: two slanted bars
            let upper = (0.08..=0.55).contains(&v) && ((u - (0.62 - 0.35 * (v - 0.08) / 0.47)).abs() <= 0.11);
            let lower = (0.45..=0.92).contains(&v) && ((u - (0.73 - 0.35 * (v - 0.45) / 0.47)).abs() <= 0.11);
            upper || lower
        }
    }
}

fn logo_parts(logo_id: usize) -> (usize, usize) {
    (logo_id % 12, (logo_id / 12) % 4)
}

/// Canonical logo image: the glyph on a white canvas, drawn inside a
/// centered square.
pub fn render_logo<T: Scalar>(logo_id: usize) -> ImageTensor<T> {
    let (glyph, color_idx) = logo_parts(logo_id);
    let color = GLYPH_COLORS[color_idx];
    let mut img = ImageTensor::filled(IMG_H, IMG_W, [T::one(), T::one(), T::one()]);
    let side = 48.0;
    let top = (IMG_H as f64 - side) / 2.0;
    let left = (IMG_W as f64 - side) / 2.0;
    for y in 0..IMG_H {
        for x in 0..IMG_W {
            let u = (x as f64 + 0.5 - left) / side;
            let v = (y as f64 + 0.5 - top) / side;
            if (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) && glyph_hit(glyph, u, v) {
                img.set_pixel(y, x, [T::from_f64(color[0]), T::from_f64(color[1]), T::from_f64(color[2])]);
            }
        }
    }
    img
}

// ---------------------------------------------------------------------------
// Image utilities
// ---------------------------------------------------------------------------

/// Bilinear resize of a 3-channel image to arbitrary dimensions.
pub fn resize_bilinear<T: Scalar>(img: &ImageTensor<T>, out_h: usize, out_w: usize) -> Vec<[T; 3]> {
    let (_, h, w) = img.data.dim();
    let mut out = vec![[T::zero(); 3]; out_h * out_w];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let sy = ((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, h as f64 - 1.0);
            let sx = ((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, w as f64 - 1.0);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fy = T::from_f64(sy - y0 as f64);
            let fx = T::from_f64(sx - x0 as f64);
            for c in 0..3 {
                let a = img.data[[c, y0, x0]];
                let b = img.data[[c, y0, x1]];
                let d = img.data[[c, y1, x0]];
                let e = img.data[[c, y1, x1]];
                let top = a + (b - a) * fx;
                let bot = d + (e - d) * fx;
                out[oy * out_w + ox][c] = top + (bot - top) * fy;
            }
        }
    }
    out
}

/// Pastes `sticker` resized to `bbox` onto `img` (plain overwrite).
pub fn paste_sticker<T: Scalar>(img: &mut ImageTensor<T>, sticker: &ImageTensor<T>, bbox: BoxPx) {
    let patch = resize_bilinear(sticker, bbox.height, bbox.width);
    for dy in 0..bbox.height {
        for dx in 0..bbox.width {
            img.set_pixel(bbox.top + dy, bbox.left + dx, patch[dy * bbox.width + dx]);
        }
    }
}

pub fn is_background<T: Scalar>(px: [T; 3]) -> bool {
    let t = T::from_f64(BACKGROUND_MIN);
    px[0] >= t && px[1] >= t && px[2] >= t
}

// ---------------------------------------------------------------------------
// Sketch extraction
// ---------------------------------------------------------------------------

const SKETCH_THRESHOLD: f64 = 0.25;

/// Gradient-magnitude line drawing: Sobel over channels, threshold at
/// 0.25, then one pixel of dilation. Lines are black on white.
pub fn extract_sketch<T: Scalar>(img: &ImageTensor<T>) -> ImageTensor<T> {
    let (_, h, w) = img.data.dim();
    let mut edge = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut gx = 0.0f64;
            let mut gy = 0.0f64;
            for c in 0..3 {
                let px = |yy: isize, xx: isize| -> f64 {
                    let yc = yy.clamp(0, h as isize - 1) as usize;
                    let xc = xx.clamp(0, w as isize - 1) as usize;
                    img.data[[c, yc, xc]].to_f64_()
                };
                let (yi, xi) = (y as isize, x as isize);
                gx += -px(yi - 1, xi - 1) - 2.0 * px(yi, xi - 1) - px(yi + 1, xi - 1)
                    + px(yi - 1, xi + 1)
                    + 2.0 * px(yi, xi + 1)
                    + px(yi + 1, xi + 1);
                gy += -px(yi - 1, xi - 1) - 2.0 * px(yi - 1, xi) - px(yi - 1, xi + 1)
                    + px(yi + 1, xi - 1)
                    + 2.0 * px(yi + 1, xi)
                    + px(yi + 1, xi + 1);
            }
            let mag = (gx * gx + gy * gy).sqrt() / 12.0;
            edge[y * w + x] = mag > SKETCH_THRESHOLD;
        }
    }
    // 1-px dilation.
    let mut dilated = edge.clone();
    for y in 0..h {
        for x in 0..w {
            if edge[y * w + x] {
                for (dy, dx) in [(0i32, 1i32), (0, -1), (1, 0), (-1, 0)] {
                    let yy = y as i32 + dy;
                    let xx = x as i32 + dx;
                    if yy >= 0 && yy < h as i32 && xx >= 0 && xx < w as i32 {
                        dilated[yy as usize * w + xx as usize] = true;
                    }
                }
            }
        }
    }
    let mut out = ImageTensor::filled(h, w, [T::one(), T::one(), T::one()]);
    for y in 0..h {
        for x in 0..w {
            if dilated[y * w + x] {
                out.set_pixel(y, x, [T::zero(), T::zero(), T::zero()]);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// K-means palette extraction
// ---------------------------------------------------------------------------

/// Lloyd's algorithm over garment pixels (background excluded via the
/// near-white heuristic). Centroids are returned sorted by cluster mass,
/// descending. If `k` exceeds the number of distinct colors, the distinct
/// colors are returned and the list is padded by repeating the last entry
/// up to length `k`.
pub fn extract_palette<T: Scalar>(
    img: &ImageTensor<T>,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<Vec<PaletteEntry>> {
    if k == 0 {
        return Err(GarmentError::Parameter("k must be >= 1".into()));
    }
    let (_, h, w) = img.data.dim();
    let mut pixels: Vec<[f64; 3]> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let p = img.pixel(y, x);
            if !is_background(p) {
                pixels.push([p[0].to_f64_(), p[1].to_f64_(), p[2].to_f64_()]);
            }
        }
    }
    if pixels.is_empty() {
        return Err(GarmentError::Undefined("no garment pixels to cluster".into()));
    }
    let mut distinct: Vec<[f64; 3]> = Vec::new();
    for p in &pixels {
        if !distinct.iter().any(|q| q == p) {
            distinct.push(*p);
        }
        if distinct.len() > k {
            break;
        }
    }
    if distinct.len() <= k {
        // Exact: count masses per distinct color.
        let mut entries: Vec<PaletteEntry> = distinct
            .iter()
            .map(|c| {
                let count = pixels.iter().filter(|p| *p == c).count();
                PaletteEntry { rgb: *c, mass: count as f64 / pixels.len() as f64 }
            })
            .collect();
        entries.sort_by(|a, b| b.mass.partial_cmp(&a.mass).unwrap());
        while entries.len() < k {
            entries.push(entries.last().unwrap().clone());
        }
        return Ok(entries);
    }

    // k-means++ seeding.
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut centroids: Vec<[f64; 3]> = Vec::with_capacity(k);
    centroids.push(pixels[rng.gen_range(0..pixels.len())]);
    let dist2 = |a: &[f64; 3], b: &[f64; 3]| -> f64 {
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
    };
    while centroids.len() < k {
        let weights: Vec<f64> = pixels
            .iter()
            .map(|p| centroids.iter().map(|c| dist2(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = weights.iter().sum();
        if total == 0.0 {
            centroids.push(pixels[rng.gen_range(0..pixels.len())]);
            continue;
        }
        let mut pick = rng.gen_range(0.0..total);
        let mut idx = 0;
        for (i, wt) in weights.iter().enumerate() {
            pick -= wt;
            if pick <= 0.0 {
                idx = i;
                break;
            }
        }
        centroids.push(pixels[idx]);
    }

    let mut assign = vec![0usize; pixels.len()];
    for _ in 0..iters {
        let mut changed = false;
        for (i, p) in pixels.iter().enumerate() {
            let best = (0..k)
                .min_by(|a, b| dist2(p, &centroids[*a]).partial_cmp(&dist2(p, &centroids[*b])).unwrap())
                .unwrap();
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![[0.0f64; 3]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in pixels.iter().enumerate() {
            let a = assign[i];
            counts[a] += 1;
            for c in 0..3 {
                sums[a][c] += p[c];
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for c in 0..3 {
                    centroids[j][c] = sums[j][c] / counts[j] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut counts = vec![0usize; k];
    for a in &assign {
        counts[*a] += 1;
    }
    let mut entries: Vec<PaletteEntry> = (0..k)
        .map(|j| PaletteEntry { rgb: centroids[j], mass: counts[j] as f64 / pixels.len() as f64 })
        .collect();
    entries.sort_by(|a, b| b.mass.partial_cmp(&a.mass).unwrap());
    Ok(entries)
}

/// K-means objective (sum of squared distances to assigned centroid) for
/// the given image; test oracle for Lloyd monotonicity.
pub fn kmeans_objective<T: Scalar>(img: &ImageTensor<T>, centroids: &[PaletteEntry]) -> f64 {
    let (_, h, w) = img.data.dim();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let p = img.pixel(y, x);
            if is_background(p) {
                continue;
            }
            let pf = [p[0].to_f64_(), p[1].to_f64_(), p[2].to_f64_()];
            let d = centroids
                .iter()
                .map(|c| {
                    (pf[0] - c.rgb[0]).powi(2) + (pf[1] - c.rgb[1]).powi(2) + (pf[2] - c.rgb[2]).powi(2)
                })
                .fold(f64::INFINITY, f64::min);
            total += d;
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Sample rendering
// ---------------------------------------------------------------------------

/// Box sizes in pixels; positions snap to the 8-px latent grid so the
/// placement aligns with whole latent cells.
const BOX_SIZES: [usize; 2] = [24, 16];

fn caption_region(bbox: BoxPx, region_bbox: BoxPx) -> &'static str {
    let cy = bbox.top as f64 + bbox.height as f64 / 2.0;
    let cx = bbox.left as f64 + bbox.width as f64 / 2.0;
    let fy = (cy - region_bbox.top as f64) / region_bbox.height.max(1) as f64;
    let fx = (cx - region_bbox.left as f64) / region_bbox.width.max(1) as f64;
    match (fy < 0.45, fx < 0.4, fx > 0.6) {
        (true, true, _) => "upper left",
        (true, _, true) => "upper right",
        (true, false, false) => "upper center",
        (false, true, _) => "lower left",
        (false, _, true) => "lower right",
        (false, false, false) => "lower center",
    }
}

fn region_bbox(region: &[bool]) -> BoxPx {
    let mut top = IMG_H;
    let mut bottom = 0;
    let mut left = IMG_W;
    let mut right = 0;
    for y in 0..IMG_H {
        for x in 0..IMG_W {
            if region[y * IMG_W + x] {
                top = top.min(y);
                bottom = bottom.max(y);
                left = left.min(x);
                right = right.max(x);
            }
        }
    }
    BoxPx::new(top, left, bottom + 1 - top, right + 1 - left)
}

/// All grid-aligned boxes of `size` fully inside the garment region.
fn valid_boxes(region: &[bool], size: usize) -> Vec<BoxPx> {
    let mut out = Vec::new();
    let mut y = 0;
    while y + size <= IMG_H {
        let mut x = 0;
        while x + size <= IMG_W {
            let mut inside = true;
            'scan: for yy in y..y + size {
                for xx in x..x + size {
                    if !region[yy * IMG_W + xx] {
                        inside = false;
                        break 'scan;
                    }
                }
            }
            if inside {
                out.push(BoxPx::new(y, x, size, size));
            }
            x += 8;
        }
        y += 8;
    }
    out
}

/// Renders the sample for a condition triple. The placement box is drawn
/// from `rng`; everything else is a pure function of the ids.
pub fn render_sample<T: Scalar>(
    sample_id: u64,
    ids: ConditionIds,
    rng: &mut ChaCha12Rng,
) -> Result<GarmentSample<T>> {
    if ids.silhouette >= N_SILHOUETTES || ids.palette >= N_PALETTES || ids.logo >= N_LOGOS {
        return Err(GarmentError::Parameter(format!("condition ids out of range: {ids:?}")));
    }
    let (class, variant) = silhouette_parts(ids.silhouette);
    let region = garment_region(class, variant);
    let colors = palette_colors(ids.palette);

    // Plain garment: flat fill or horizontal stripes (5/3 row pattern).
    let mut plain = ImageTensor::filled(IMG_H, IMG_W, [T::one(), T::one(), T::one()]);
    let mut fill_counts = vec![0usize; colors.len()];
    for y in 0..IMG_H {
        for x in 0..IMG_W {
            if region[y * IMG_W + x] {
                let which = if colors.len() == 1 {
                    0
                } else if y % 8 < 5 {
                    0
                } else {
                    1
                };
                let c = colors[which];
                fill_counts[which] += 1;
                plain.set_pixel(y, x, [T::from_f64(c[0]), T::from_f64(c[1]), T::from_f64(c[2])]);
            }
        }
    }
    let total: usize = fill_counts.iter().sum();
    if total == 0 {
        return Err(GarmentError::Parameter("empty garment region".into()));
    }
    let palette: Vec<PaletteEntry> = colors
        .iter()
        .zip(&fill_counts)
        .map(|(c, n)| PaletteEntry { rgb: *c, mass: *n as f64 / total as f64 })
        .collect();

    // Placement box: uniform over valid grid-aligned boxes, larger size
    // preferred when it fits.
    let mut bbox = None;
    for size in BOX_SIZES {
        let candidates = valid_boxes(&region, size);
        if !candidates.is_empty() {
            bbox = Some(candidates[rng.gen_range(0..candidates.len())]);
            break;
        }
    }
    let bbox = bbox.ok_or_else(|| {
        GarmentError::Parameter(format!("no valid logo placement for silhouette {}", ids.silhouette))
    })?;

    let logo = render_logo::<T>(ids.logo);
    let mut image = plain.clone();
    paste_sticker(&mut image, &logo, bbox);

    let silhouette = extract_sketch(&plain);
    let color_ref = render_color_ref::<T>(&palette);
    let mask = MaskTensor::from_box(IMG_H, IMG_W, bbox)?;
    let rb = region_bbox(&region);
    let prompt = format!(
        "a {} {} with a {} logo at the {}",
        palette_main_name(ids.palette),
        class.name(),
        GLYPH_NAMES[logo_parts(ids.logo).0],
        caption_region(bbox, rb)
    );

    Ok(GarmentSample {
        sample_id,
        image,
        plain,
        prompt,
        silhouette,
        color_ref,
        logo,
        mask,
        palette,
        garment_class: class,
        ids,
    })
}

/// Color reference: vertical bands with widths proportional to fill mass.
pub fn render_color_ref<T: Scalar>(palette: &[PaletteEntry]) -> ImageTensor<T> {
    let mut img = ImageTensor::zeros(IMG_H, IMG_W);
    let total: f64 = palette.iter().map(|p| p.mass).sum();
    let mut cuts = Vec::with_capacity(palette.len());
    let mut acc = 0.0;
    for p in palette {
        acc += p.mass / total;
        cuts.push((acc * IMG_W as f64).round() as usize);
    }
    for x in 0..IMG_W {
        let idx = cuts.iter().position(|c| x < *c).unwrap_or(palette.len() - 1);
        let c = palette[idx].rgb;
        for y in 0..IMG_H {
            img.set_pixel(y, x, [T::from_f64(c[0]), T::from_f64(c[1]), T::from_f64(c[2])]);
        }
    }
    img
}

/// Per-sample RNG stream: independent of generation order.
pub fn sample_rng(dataset_seed: u64, split: &str, index: u64) -> ChaCha12Rng {
    let mut h: u64 = 0xcbf29ce484222325 ^ dataset_seed;
    for &b in split.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^= index.wrapping_mul(0x9e3779b97f4a7c15);
    ChaCha12Rng::seed_from_u64(h)
}

/// Pixels of the plain render equal to the dominant fill, minus the logo
/// box: the region used by the color-fidelity metric.
pub fn dominant_fill_region<T: Scalar>(
    plain: &ImageTensor<T>,
    palette: &[PaletteEntry],
    exclude: Option<BoxPx>,
) -> Vec<(usize, usize)> {
    let dom = palette[0].rgb;
    let tol = 0.5 / 255.0;
    let mut out = Vec::new();
    for y in 0..IMG_H {
        for x in 0..IMG_W {
            if let Some(b) = exclude {
                if b.contains(y, x) {
                    continue;
                }
            }
            let p = plain.pixel(y, x);
            if (p[0].to_f64_() - dom[0]).abs() < tol
                && (p[1].to_f64_() - dom[1]).abs() < tol
                && (p[2].to_f64_() - dom[2]).abs() < tol
            {
                out.push((y, x));
            }
        }
    }
    out
}
