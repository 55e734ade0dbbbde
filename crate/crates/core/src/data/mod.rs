//! Tiles, datasets and batching.

pub mod augment;
pub mod raster;
pub mod synth;
pub mod tiling;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::VOID;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const NUM_CLASSES: usize = 6;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "impervious_surface",
    "building",
    "low_vegetation",
    "tree",
    "car",
    "clutter",
];

pub const IMPERVIOUS: u8 = 0;
pub const BUILDING: u8 = 1;
pub const LOW_VEGETATION: u8 = 2;
pub const TREE: u8 = 3;
pub const CAR: u8 = 4;
pub const CLUTTER: u8 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Invalid(format!("unknown split {s:?} (train, val, test)"))),
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            _ => Err(Error::Invalid(format!("unknown domain {s:?} (source, target)"))),
        }
    }
}

/// One 8-bit RGB tile in planar (CHW) order with its label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tile {
    pub height: usize,
    pub width: usize,
    pub image: Vec<u8>,
    pub label: Vec<u8>,
}

impl Tile {
    pub fn new(height: usize, width: usize, image: Vec<u8>, label: Vec<u8>) -> Result<Self> {
        if image.len() != 3 * height * width || label.len() != height * width {
            return Err(Error::shape(
                "tile",
                format!("{}x{} tile with {} image bytes and {} labels", height, width, image.len(), label.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            image,
            label,
        })
    }

    pub fn validate_labels(&self, classes: usize) -> Result<()> {
        match self.label.iter().find(|&&l| l != VOID && l as usize >= classes) {
            Some(bad) => Err(Error::Invalid(format!("label value {bad} with {classes} classes"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileDataset {
    pub domain: Domain,
    pub split: Split,
    pub tiles: Vec<Tile>,
}

impl TileDataset {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// Pixel count per class plus VOID as the last entry.
    pub fn class_histogram(&self) -> [u64; NUM_CLASSES + 1] {
        let mut h = [0u64; NUM_CLASSES + 1];
        for t in &self.tiles {
            for &l in &t.label {
                h[if l == VOID { NUM_CLASSES } else { (l as usize).min(NUM_CLASSES) }] += 1;
            }
        }
        h
    }

    pub fn class_frequencies(&self) -> Vec<f64> {
        let h = self.class_histogram();
        let total: u64 = h[..NUM_CLASSES].iter().sum();
        h[..NUM_CLASSES]
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect()
    }
}

/// Maps 8-bit intensities to network inputs.
pub fn normalize(v: u8) -> f64 {
    (v as f64 / 255.0 - 0.5) / 0.25
}

/// Stacks tiles into `[N, 3, H, W]` inputs and flat `N*H*W` labels.
pub fn to_batch(tiles: &[&Tile]) -> Result<(Tensor, Vec<u8>)> {
    let first = tiles.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(tiles.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(tiles.len() * h * w);
    for t in tiles {
        if (t.height, t.width) != (h, w) {
            return Err(Error::shape("batch", format!("mixed tile sizes {h}x{w} and {}x{}", t.height, t.width)));
        }
        data.extend(t.image.iter().map(|&v| normalize(v)));
        labels.extend_from_slice(&t.label);
    }
    Ok((Tensor::new(&[tiles.len(), 3, h, w], data)?, labels))
}

/// Draws indices from consecutive shuffled passes over `0..len`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSampler {
    len: usize,
    order: Vec<usize>,
    cursor: usize,
    pub epoch: u64,
}

impl EpochSampler {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        }
    }

    pub fn next<R: Rng>(&mut self, rng: &mut R) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..self.len).collect();
            self.order.shuffle(rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    pub fn batch<R: Rng>(&mut self, n: usize, rng: &mut R) -> Vec<usize> {
        (0..n).map(|_| self.next(rng)).collect()
    }
}
