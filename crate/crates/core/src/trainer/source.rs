//! Dataset access for training and evaluation, with a record of every read.

use super::config::DataConfig;
use crate::data::raster::{load_split, Manifest};
use crate::data::{Domain, Split, TileDataset};
use crate::error::{Error, Result};
use crate::VOID;
use std::cell::RefCell;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataAccess {
    pub domain: Domain,
    pub split: Split,
    pub labels: bool,
}

pub struct DataSource {
    config: DataConfig,
    manifest: Option<Manifest>,
    log: RefCell<Vec<DataAccess>>,
}

impl DataSource {
    pub fn new(config: &DataConfig, tile_size: usize) -> Result<Self> {
        let manifest = match config {
            DataConfig::Synthetic(_) => None,
            DataConfig::Directory(dir) => {
                let m = Manifest::load(dir)?;
                if m.tile_size != tile_size {
                    return Err(Error::Config {
                        path: "data.directory".into(),
                        msg: format!("dataset tile size {} differs from network.tile_size {tile_size}", m.tile_size),
                    });
                }
                Some(m)
            }
        };
        Ok(Self {
            config: config.clone(),
            manifest,
            log: RefCell::new(Vec::new()),
        })
    }

    /// Loads a split; without labels every pixel is VOID.
    pub fn load(&self, domain: Domain, split: Split, labels: bool) -> Result<TileDataset> {
        self.log.borrow_mut().push(DataAccess { domain, split, labels });
        match (&self.config, &self.manifest) {
            (DataConfig::Directory(dir), Some(m)) => load_split(dir, m, domain, split, labels),
            (DataConfig::Synthetic(s), _) => {
                let mut d = s.generate(domain, split)?;
                if !labels {
                    for t in &mut d.tiles {
                        t.label.fill(VOID);
                    }
                }
                Ok(d)
            }
            _ => unreachable!("directory sources always carry a manifest"),
        }
    }

    pub fn access_log(&self) -> Vec<DataAccess> {
        self.log.borrow().clone()
    }

    pub fn touched(&self, domain: Domain, split: Split) -> bool {
        self.log.borrow().iter().any(|a| a.domain == domain && a.split == split)
    }
}
