//! Binary PPM/PGM rasters and the tile-dataset directory layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/images/<domain>_<split>_<index>.ppm   P6, 8-bit RGB
//! <dir>/labels/<domain>_<split>_<index>.pgm   P5, class index, 255 = VOID
//! ```

use super::synth::{DomainSpec, SynthConfig};
use super::tiling::tile_crop;
use super::{Domain, Split, Tile, TileDataset, CLASS_NAMES};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const FORMAT: &str = "memadapt-tiles/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub domain: Domain,
    pub split: Split,
    pub files: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub classes: Vec<String>,
    pub tile_size: usize,
    #[serde(default)]
    pub domains: BTreeMap<Domain, DomainSpec>,
    #[serde(default)]
    pub generator: Option<SynthConfig>,
    pub splits: Vec<SplitEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let m: Manifest = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: format!("{}:{}", path.display(), e.path()),
            msg: e.inner().to_string(),
        })?;
        if m.format != FORMAT {
            return Err(Error::Invalid(format!("{}: unsupported format {:?}", path.display(), m.format)));
        }
        Ok(m)
    }

    pub fn entry(&self, domain: Domain, split: Split) -> Option<&SplitEntry> {
        self.splits.iter().find(|e| e.domain == domain && e.split == split)
    }
}

fn format_err(file: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        file: file.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Parses a binary netpbm header; returns (width, height, payload offset).
fn parse_header(bytes: &[u8], magic: &[u8; 2], file: &Path) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err(
            file,
            0,
            format!("expected magic {:?}", std::str::from_utf8(magic).unwrap_or("?")),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(file, pos, "expected a decimal header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(file, start, "header field out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(file, pos, "expected whitespace after header"));
    }
    if fields[2] != 255 {
        return Err(format_err(file, pos, format!("maxval {} unsupported (only 255)", fields[2])));
    }
    Ok((fields[0], fields[1], pos + 1))
}

fn read_netpbm(path: &Path, magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, off) = parse_header(&bytes, magic, path)?;
    let need = w * h * channels;
    if bytes.len() < off + need {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated payload: {} of {need} bytes", bytes.len() - off),
        ));
    }
    Ok((w, h, bytes[off..off + need].to_vec()))
}

fn write_netpbm(path: &Path, magic: &str, w: usize, h: usize, payload: &[u8]) -> Result<()> {
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(payload);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a P6 file into planar RGB; returns (height, width, CHW bytes).
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, inter) = read_netpbm(path, b"P6", 3)?;
    let n = w * h;
    let mut planar = vec![0u8; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            planar[c * n + i] = inter[i * 3 + c];
        }
    }
    Ok((h, w, planar))
}

/// Writes planar RGB as P6.
pub fn write_ppm(path: &Path, height: usize, width: usize, planar: &[u8]) -> Result<()> {
    let n = height * width;
    assert_eq!(planar.len(), 3 * n);
    let mut inter = vec![0u8; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            inter[i * 3 + c] = planar[c * n + i];
        }
    }
    write_netpbm(path, "P6", width, height, &inter)
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, data) = read_netpbm(path, b"P5", 1)?;
    Ok((h, w, data))
}

pub fn write_pgm(path: &Path, height: usize, width: usize, gray: &[u8]) -> Result<()> {
    assert_eq!(gray.len(), height * width);
    write_netpbm(path, "P5", width, height, gray)
}

pub fn file_stem(domain: Domain, split: Split, index: usize) -> String {
    format!("{}_{}_{index:05}", domain.name(), split.name())
}

/// Writes tiles and returns their manifest entry.
pub fn write_split(dir: &Path, data: &TileDataset) -> Result<SplitEntry> {
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut files = Vec::with_capacity(data.len());
    for (i, t) in data.tiles.iter().enumerate() {
        let stem = file_stem(data.domain, data.split, i);
        write_ppm(&dir.join("images").join(format!("{stem}.ppm")), t.height, t.width, &t.image)?;
        write_pgm(&dir.join("labels").join(format!("{stem}.pgm")), t.height, t.width, &t.label)?;
        files.push(stem);
    }
    Ok(SplitEntry {
        domain: data.domain,
        split: data.split,
        files,
    })
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(manifest)?).map_err(|e| Error::io(&path, e))
}

/// Generates every split of both domains into `dir`.
pub fn write_synthetic(dir: &Path, cfg: &SynthConfig) -> Result<Manifest> {
    let mut splits = Vec::new();
    for domain in [Domain::Source, Domain::Target] {
        for split in Split::ALL {
            splits.push(write_split(dir, &cfg.generate(domain, split)?)?);
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        tile_size: cfg.tile_size,
        domains: [(Domain::Source, cfg.source.clone()), (Domain::Target, cfg.target.clone())].into(),
        generator: Some(cfg.clone()),
        splits,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

/// Loads one split. Larger rasters are cut into half-overlapping tiles.
pub fn load_split(dir: &Path, manifest: &Manifest, domain: Domain, split: Split, with_labels: bool) -> Result<TileDataset> {
    let entry = manifest.entry(domain, split).ok_or_else(|| {
        Error::Invalid(format!("{}: manifest has no {}/{} split", dir.display(), domain.name(), split.name()))
    })?;
    let classes = manifest.classes.len();
    let size = manifest.tile_size;
    let mut tiles = Vec::new();
    for stem in &entry.files {
        let ip: PathBuf = dir.join("images").join(format!("{stem}.ppm"));
        let (h, w, image) = read_ppm(&ip)?;
        let label = if with_labels {
            let lp = dir.join("labels").join(format!("{stem}.pgm"));
            let (lh, lw, label) = read_pgm(&lp)?;
            if (lh, lw) != (h, w) {
                return Err(Error::Invalid(format!("{}: label size {lw}x{lh} vs image {w}x{h}", lp.display())));
            }
            if let Some(bad) = label.iter().find(|&&l| l != crate::VOID && l as usize >= classes) {
                return Err(Error::Invalid(format!(
                    "{}: label value {bad} outside {classes} classes",
                    lp.display()
                )));
            }
            label
        } else {
            vec![crate::VOID; h * w]
        };
        let tile = Tile::new(h, w, image, label)?;
        if (h, w) == (size, size) {
            tiles.push(tile);
        } else {
            tiles.extend(tile_crop(&tile, size, (size / 2).max(1))?);
        }
    }
    Ok(TileDataset { domain, split, tiles })
}
