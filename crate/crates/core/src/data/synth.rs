//! Procedural aerial-style tiles rendered under a configurable sensor model.
//!
//! A tile's layout (label map and base texture) depends only on the layout
//! seed, the domain's seed offset, the split and the tile index. The domain
//! transform then blurs, permutes channels, applies gain and bias, adds noise
//! and quantizes.

use super::{Domain, Split, Tile, TileDataset, BUILDING, CAR, CLUTTER, IMPERVIOUS, LOW_VEGETATION, TREE};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub channel_permutation: [usize; 3],
    pub gain: [f64; 3],
    pub bias: [f64; 3],
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub layout_seed_offset: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self::source()
    }
}

impl DomainSpec {
    pub fn source() -> Self {
        Self {
            channel_permutation: [0, 1, 2],
            gain: [1.0; 3],
            bias: [0.0; 3],
            blur_sigma: 0.0,
            noise_sigma: 0.02,
            layout_seed_offset: 0,
        }
    }

    /// Different geography, illumination and resolution, same sensor bands.
    pub fn target_same_sensor() -> Self {
        Self {
            channel_permutation: [0, 1, 2],
            gain: [0.8, 0.9, 1.2],
            bias: [0.1, 0.06, -0.08],
            blur_sigma: 0.8,
            noise_sigma: 0.04,
            layout_seed_offset: 7919,
        }
    }

    /// As above with the bands reordered, a stand-in for a different sensor.
    pub fn target_cross_sensor() -> Self {
        Self {
            channel_permutation: [1, 0, 2],
            ..Self::target_same_sensor()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; 3];
        for &c in &self.channel_permutation {
            if c > 2 || std::mem::replace(&mut seen[c], true) {
                return Err(Error::Invalid(format!(
                    "channel_permutation {:?} is not a permutation of 0..3",
                    self.channel_permutation
                )));
            }
        }
        if self.gain.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::Invalid("gain must be positive".into()));
        }
        if !(self.blur_sigma >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Invalid("blur_sigma and noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Layout RNG for one tile.
fn tile_rng(layout_seed: u64, offset: u64, split: Split, index: usize, stream_bit: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(layout_seed.wrapping_add(offset));
    rng.set_stream((split.index() << 40) | (index as u64) | (stream_bit << 60));
    rng
}

/// Label map and linear-intensity RGB planes before the sensor model.
pub struct Layout {
    pub size: usize,
    pub label: Vec<u8>,
    pub rgb: [Vec<f64>; 3],
}

fn fill_where(label: &mut [u8], size: usize, class: u8, mut inside: impl FnMut(f64, f64) -> bool) {
    for y in 0..size {
        for x in 0..size {
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                label[y * size + x] = class;
            }
        }
    }
}

struct Road {
    px: f64,
    py: f64,
    dx: f64,
    dy: f64,
    half_width: f64,
}

pub fn draw_layout<R: Rng>(size: usize, rng: &mut R) -> Layout {
    let s = size as f64;
    let k = s / 32.0;
    let mut label = vec![LOW_VEGETATION; size * size];

    let n_roads = [0, 1, 1, 2][rng.gen_range(0..4)];
    let mut roads = Vec::new();
    for _ in 0..n_roads {
        let angle: f64 = match rng.gen_range(0..3) {
            0 => 0.0,
            1 => std::f64::consts::FRAC_PI_2,
            _ => rng.gen_range(0.0..std::f64::consts::PI),
        };
        let road = Road {
            px: rng.gen_range(0.2 * s..0.8 * s),
            py: rng.gen_range(0.2 * s..0.8 * s),
            dx: angle.cos(),
            dy: angle.sin(),
            half_width: rng.gen_range(1.5..2.8) * k,
        };
        fill_where(&mut label, size, IMPERVIOUS, |x, y| {
            ((x - road.px) * road.dy - (y - road.py) * road.dx).abs() < road.half_width
        });
        roads.push(road);
    }

    let mut roofs = Vec::new();
    for _ in 0..rng.gen_range(0..=3) {
        let (w, h) = (rng.gen_range(5.0..12.0) * k, rng.gen_range(5.0..12.0) * k);
        let (x0, y0) = (rng.gen_range(-0.2 * w..s - 0.8 * w), rng.gen_range(-0.2 * h..s - 0.8 * h));
        fill_where(&mut label, size, BUILDING, |x, y| x >= x0 && x < x0 + w && y >= y0 && y < y0 + h);
        roofs.push((x0, y0, w, h, rng.gen_range(0..3)));
    }

    for _ in 0..rng.gen_range(0..=4) {
        let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
        let lobes: Vec<(f64, f64, f64)> = (0..rng.gen_range(1..=3))
            .map(|_| {
                (
                    cx + rng.gen_range(-3.0..3.0) * k,
                    cy + rng.gen_range(-3.0..3.0) * k,
                    rng.gen_range(2.5..5.0) * k,
                )
            })
            .collect();
        fill_where(&mut label, size, TREE, |x, y| {
            lobes.iter().any(|&(lx, ly, r)| (x - lx).powi(2) + (y - ly).powi(2) < r * r)
        });
    }

    let mut cars = Vec::new();
    for road in &roads {
        for _ in 0..rng.gen_range(0..=2) {
            let t = rng.gen_range(-0.5 * s..0.5 * s);
            let (cx, cy) = (road.px + t * road.dx, road.py + t * road.dy);
            let along = road.dx.abs() >= road.dy.abs();
            let (hw, hh) = if along { (2.0 * k, 1.0 * k) } else { (1.0 * k, 2.0 * k) };
            let colour = rng.gen_range(0..4);
            let before = label.clone();
            fill_where(&mut label, size, CAR, |x, y| {
                let (ix, iy) = (x as usize, y as usize);
                (x - cx).abs() < hw && (y - cy).abs() < hh && before[iy * size + ix] == IMPERVIOUS
            });
            cars.push((cx, cy, hw, hh, colour));
        }
    }

    for _ in 0..rng.gen_range(0..=4) {
        let (mut x, mut y) = (rng.gen_range(0..size) as i64, rng.gen_range(0..size) as i64);
        for _ in 0..rng.gen_range(1..=4) {
            if (0..size as i64).contains(&x) && (0..size as i64).contains(&y) {
                label[y as usize * size + x as usize] = CLUTTER;
            }
            x += rng.gen_range(-1..=1);
            y += rng.gen_range(-1..=1);
        }
    }

    let rgb = render(size, &label, &roofs, &cars, rng);
    Layout { size, label, rgb }
}

const ROOF_COLOURS: [[f64; 3]; 3] = [[0.68, 0.36, 0.30], [0.74, 0.74, 0.78], [0.52, 0.42, 0.40]];
const CAR_COLOURS: [[f64; 3]; 4] = [[0.85, 0.12, 0.10], [0.15, 0.25, 0.80], [0.92, 0.92, 0.92], [0.08, 0.08, 0.10]];

fn render<R: Rng>(
    size: usize,
    label: &[u8],
    roofs: &[(f64, f64, f64, f64, usize)],
    cars: &[(f64, f64, f64, f64, usize)],
    rng: &mut R,
) -> [Vec<f64>; 3] {
    let n = size * size;
    let mut rgb = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let fine = Normal::new(0.0, 1.0).expect("unit normal");
    // slowly varying illumination field
    let (ax, ay, phase) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..6.28));
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let shade = 0.03 * ((ax * fx + ay * fy) * 0.15 + phase).sin();
            let z: f64 = fine.sample(rng);
            let (base, tex) = match label[i] {
                IMPERVIOUS => ([0.55, 0.55, 0.57], 0.025),
                BUILDING => {
                    let roof = roofs
                        .iter()
                        .rev()
                        .find(|r| fx >= r.0 && fx < r.0 + r.2 && fy >= r.1 && fy < r.1 + r.3);
                    match roof {
                        Some(&(x0, _, w, _, c)) => {
                            let ridge = if fx - x0 < w / 2.0 { 0.04 } else { -0.04 };
                            let col = ROOF_COLOURS[c];
                            ([col[0] + ridge, col[1] + ridge, col[2] + ridge], 0.02)
                        }
                        None => (ROOF_COLOURS[0], 0.02),
                    }
                }
                LOW_VEGETATION => ([0.46, 0.62, 0.30], 0.045),
                TREE => ([0.20, 0.40, 0.17], 0.08),
                CAR => {
                    let c = cars
                        .iter()
                        .rev()
                        .find(|c| (fx - c.0).abs() < c.2 && (fy - c.1).abs() < c.3)
                        .map_or(0, |c| c.4);
                    (CAR_COLOURS[c], 0.03)
                }
                _ => ([0.62, 0.30, 0.55], 0.10),
            };
            for c in 0..3 {
                rgb[c][i] = base[c] + shade + tex * z;
            }
        }
    }
    rgb
}

/// Separable Gaussian blur of one plane with edge replication.
pub fn gaussian_blur(plane: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let r = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|v| v / z).collect();
    let clampi = |v: i64, hi: usize| v.clamp(0, hi as i64 - 1) as usize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * plane[y * width + clampi(x as i64 + j as i64 - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = kernel
                .iter()
                .enumerate()
                .map(|(j, k)| k * tmp[clampi(y as i64 + j as i64 - r, height) * width + x])
                .sum();
        }
    }
    out
}

/// Applies the sensor model to linear RGB planes and quantizes to 8 bits (CHW).
pub fn apply_domain<R: Rng>(rgb: &[Vec<f64>; 3], size: usize, spec: &DomainSpec, rng: &mut R) -> Vec<u8> {
    let blurred: Vec<Vec<f64>> = rgb.iter().map(|p| gaussian_blur(p, size, size, spec.blur_sigma)).collect();
    let n = size * size;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = vec![0u8; 3 * n];
    for c in 0..3 {
        let src = &blurred[spec.channel_permutation[c]];
        for i in 0..n {
            let mut v = src[i] * spec.gain[c] + spec.bias[c];
            if spec.noise_sigma > 0.0 {
                v += spec.noise_sigma * noise.sample(rng);
            }
            out[c * n + i] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

/// Tile `index` of `split` for a domain.
pub fn generate_tile(layout_seed: u64, spec: &DomainSpec, split: Split, index: usize, tile_size: usize) -> Tile {
    let mut layout_rng = tile_rng(layout_seed, spec.layout_seed_offset, split, index, 0);
    let layout = draw_layout(tile_size, &mut layout_rng);
    let mut sensor_rng = tile_rng(layout_seed, spec.layout_seed_offset, split, index, 1);
    let image = apply_domain(&layout.rgb, tile_size, spec, &mut sensor_rng);
    Tile {
        height: tile_size,
        width: tile_size,
        image,
        label: layout.label,
    }
}

pub fn generate_split(
    layout_seed: u64,
    domain: Domain,
    spec: &DomainSpec,
    split: Split,
    n_tiles: usize,
    tile_size: usize,
) -> Result<TileDataset> {
    spec.validate()?;
    if tile_size % 4 != 0 || tile_size == 0 {
        return Err(Error::Invalid(format!("tile size {tile_size} must be a positive multiple of 4")));
    }
    let tiles = (0..n_tiles)
        .into_par_iter()
        .map(|i| generate_tile(layout_seed, spec, split, i, tile_size))
        .collect();
    Ok(TileDataset { domain, split, tiles })
}

/// Training split of one domain.
pub fn generate(layout_seed: u64, spec: &DomainSpec, n_tiles: usize, tile_size: usize) -> Result<TileDataset> {
    generate_split(layout_seed, Domain::Source, spec, Split::Train, n_tiles, tile_size)
}

/// Generator parameters for a two-domain dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub layout_seed: u64,
    pub tile_size: usize,
    pub train_tiles: usize,
    pub val_tiles: usize,
    pub test_tiles: usize,
    pub source: DomainSpec,
    pub target: DomainSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            layout_seed: 0,
            tile_size: 32,
            train_tiles: 400,
            val_tiles: 50,
            test_tiles: 100,
            source: DomainSpec::source(),
            target: DomainSpec::target_same_sensor(),
        }
    }
}

impl SynthConfig {
    pub fn spec(&self, domain: Domain) -> &DomainSpec {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_tiles,
            Split::Val => self.val_tiles,
            Split::Test => self.test_tiles,
        }
    }

    pub fn generate(&self, domain: Domain, split: Split) -> Result<TileDataset> {
        generate_split(
            self.layout_seed,
            domain,
            self.spec(domain),
            split,
            self.count(split),
            self.tile_size,
        )
    }
}
