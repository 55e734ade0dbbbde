//! Geometric and photometric tile augmentation.

use super::synth::gaussian_blur;
use super::Tile;
use crate::VOID;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffineAug {
    pub enabled: bool,
    pub hflip: bool,
    pub vflip: bool,
    pub rotate90: bool,
    /// Probability of an extra shift-scale-rotate.
    pub ssr_prob: f64,
    pub max_shift: f64,
    pub max_scale: f64,
    pub max_rotate_deg: f64,
}

impl Default for AffineAug {
    fn default() -> Self {
        Self {
            enabled: true,
            hflip: true,
            vflip: true,
            rotate90: true,
            ssr_prob: 0.25,
            max_shift: 0.0625,
            max_scale: 0.1,
            max_rotate_deg: 15.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColorAug {
    pub enabled: bool,
    /// Maximum additive shift in 8-bit units.
    pub brightness: f64,
    /// Maximum relative contrast change.
    pub contrast: f64,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
}

fn remap(tile: &Tile, out_h: usize, out_w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Tile {
    let (h, w) = (tile.height, tile.width);
    let mut image = vec![0u8; 3 * out_h * out_w];
    let mut label = vec![0u8; out_h * out_w];
    for y in 0..out_h {
        for x in 0..out_w {
            let (sy, sx) = src(y, x);
            label[y * out_w + x] = tile.label[sy * w + sx];
            for c in 0..3 {
                image[(c * out_h + y) * out_w + x] = tile.image[(c * h + sy) * w + sx];
            }
        }
    }
    Tile {
        height: out_h,
        width: out_w,
        image,
        label,
    }
}

pub fn hflip(tile: &Tile) -> Tile {
    let w = tile.width;
    remap(tile, tile.height, w, |y, x| (y, w - 1 - x))
}

pub fn vflip(tile: &Tile) -> Tile {
    let h = tile.height;
    remap(tile, h, tile.width, |y, x| (h - 1 - y, x))
}

/// Counter-clockwise rotation by `k` quarter turns.
pub fn rot90(tile: &Tile, k: usize) -> Tile {
    let mut t = tile.clone();
    for _ in 0..k % 4 {
        let (h, w) = (t.height, t.width);
        t = remap(&t, w, h, |y, x| (x, w - 1 - y));
    }
    t
}

/// Rotation by `angle_deg` and scaling about the centre, then a shift in
/// pixels. Labels are sampled nearest-neighbour, images bilinearly; samples
/// outside the source become VOID / black.
pub fn shift_scale_rotate(tile: &Tile, dx: f64, dy: f64, scale: f64, angle_deg: f64) -> Tile {
    let (h, w) = (tile.height, tile.width);
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let mut image = vec![0u8; 3 * h * w];
    let mut label = vec![VOID; h * w];
    for y in 0..h {
        for x in 0..w {
            // inverse map of the output pixel centre
            let (ox, oy) = (x as f64 + 0.5 - cx - dx, y as f64 + 0.5 - cy - dy);
            let sx = (cos * ox + sin * oy) / scale + cx;
            let sy = (-sin * ox + cos * oy) / scale + cy;
            if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            label[y * w + x] = tile.label[sy as usize * w + sx as usize];
            let (fx, fy) = ((sx - 0.5).clamp(0.0, (w - 1) as f64), (sy - 0.5).clamp(0.0, (h - 1) as f64));
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
            for c in 0..3 {
                let p = |yy: usize, xx: usize| tile.image[(c * h + yy) * w + xx] as f64;
                let v = (1.0 - ay) * ((1.0 - ax) * p(y0, x0) + ax * p(y0, x1)) + ay * ((1.0 - ax) * p(y1, x0) + ax * p(y1, x1));
                image[(c * h + y) * w + x] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Tile {
        height: h,
        width: w,
        image,
        label,
    }
}

pub fn augment_affine<R: Rng>(tile: &Tile, params: &AffineAug, rng: &mut R) -> Tile {
    if !params.enabled {
        return tile.clone();
    }
    let mut t = tile.clone();
    if params.hflip && rng.gen_bool(0.5) {
        t = hflip(&t);
    }
    if params.vflip && rng.gen_bool(0.5) {
        t = vflip(&t);
    }
    if params.rotate90 && t.height == t.width {
        t = rot90(&t, rng.gen_range(0..4));
    }
    if params.ssr_prob > 0.0 && rng.gen_bool(params.ssr_prob.min(1.0)) {
        let dx = rng.gen_range(-1.0..=1.0) * params.max_shift * t.width as f64;
        let dy = rng.gen_range(-1.0..=1.0) * params.max_shift * t.height as f64;
        let scale = 1.0 + rng.gen_range(-1.0..=1.0) * params.max_scale;
        let angle = rng.gen_range(-1.0..=1.0) * params.max_rotate_deg;
        t = shift_scale_rotate(&t, dx, dy, scale, angle);
    }
    t
}

pub fn adjust_brightness(image: &mut [u8], shift: f64) {
    for v in image {
        *v = (*v as f64 + shift).round().clamp(0.0, 255.0) as u8;
    }
}

/// Scales each channel about its mean.
pub fn adjust_contrast(image: &mut [u8], factor: f64) {
    let n = image.len() / 3;
    for plane in image.chunks_mut(n) {
        let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        for v in plane {
            *v = (mean + (*v as f64 - mean) * factor).round().clamp(0.0, 255.0) as u8;
        }
    }
}

pub fn add_noise<R: Rng>(image: &mut [u8], sigma: f64, rng: &mut R) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    for v in image {
        *v = (*v as f64 + normal.sample(rng)).round().clamp(0.0, 255.0) as u8;
    }
}

pub fn blur_image(image: &mut [u8], height: usize, width: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let n = height * width;
    for plane in image.chunks_mut(n) {
        let f: Vec<f64> = plane.iter().map(|&v| v as f64).collect();
        for (v, b) in plane.iter_mut().zip(gaussian_blur(&f, height, width, sigma)) {
            *v = b.round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// Random brightness, contrast, blur and noise; the label is untouched.
pub fn augment_colorspace<R: Rng>(tile: &Tile, params: &ColorAug, rng: &mut R) -> Tile {
    let mut t = tile.clone();
    if !params.enabled {
        return t;
    }
    if params.brightness > 0.0 {
        adjust_brightness(&mut t.image, rng.gen_range(-params.brightness..=params.brightness));
    }
    if params.contrast > 0.0 {
        adjust_contrast(&mut t.image, 1.0 + rng.gen_range(-params.contrast..=params.contrast));
    }
    if params.blur_sigma > 0.0 {
        blur_image(&mut t.image, t.height, t.width, rng.gen_range(0.0..=params.blur_sigma));
    }
    add_noise(&mut t.image, params.noise_sigma, rng);
    t
}
