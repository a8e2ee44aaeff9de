//! Binary dataset cache and JSON split manifest.
//!
//! Cache layout (little-endian): magic `DCGCNDS1`, u32 schema version,
//! behavior/user/item key tables, then `(user u32, item u32, behavior u32,
//! timestamp u64)` records and per-user `(test u32, validation u32)` with
//! `u32::MAX` for "none".

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Interaction, InteractionDataset};
use crate::error::{Error, Result};
use crate::tensor::{read_str, read_u32, read_u64, write_str, write_u32, write_u64};

pub const DATASET_MAGIC: &[u8; 8] = b"DCGCNDS1";
pub const DATASET_VERSION: u32 = 1;

const NONE: u32 = u32::MAX;

fn write_keys<W: Write>(w: &mut W, keys: &[String]) -> Result<()> {
    write_u32(w, keys.len() as u32)?;
    keys.iter().try_for_each(|k| write_str(w, k))
}

fn read_keys<R: Read>(r: &mut R) -> Result<Vec<String>> {
    let n = read_u32(r)?;
    (0..n).map(|_| read_str(r)).collect()
}

fn opt(x: Option<usize>) -> u32 {
    x.map_or(NONE, |v| v as u32)
}

impl InteractionDataset {
    pub fn write_cache<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        write_u32(w, DATASET_VERSION)?;
        write_keys(w, &self.behaviors)?;
        write_keys(w, &self.user_keys)?;
        write_keys(w, &self.item_keys)?;
        write_u64(w, self.records.len() as u64)?;
        for r in &self.records {
            write_u32(w, r.user as u32)?;
            write_u32(w, r.item as u32)?;
            write_u32(w, r.behavior as u32)?;
            write_u64(w, r.timestamp)?;
        }
        for u in 0..self.num_users() {
            write_u32(w, opt(self.test_item[u]))?;
            write_u32(w, opt(self.validation_item[u]))?;
        }
        Ok(())
    }

    pub fn read_cache<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset cache (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset cache version {version}")));
        }
        let behaviors = read_keys(r)?;
        let user_keys = read_keys(r)?;
        let item_keys = read_keys(r)?;
        let n = read_u64(r)? as usize;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let user = read_u32(r)? as usize;
            let item = read_u32(r)? as usize;
            let behavior = read_u32(r)? as usize;
            let timestamp = read_u64(r)?;
            if user >= user_keys.len() || item >= item_keys.len() || behavior >= behaviors.len() {
                return Err(Error::Format("record index out of range".into()));
            }
            records.push(Interaction {
                user,
                item,
                behavior,
                timestamp,
            });
        }
        let decode = |x: u32| (x != NONE).then_some(x as usize);
        let mut test_item = Vec::with_capacity(user_keys.len());
        let mut validation_item = Vec::with_capacity(user_keys.len());
        for _ in 0..user_keys.len() {
            test_item.push(decode(read_u32(r)?));
            validation_item.push(decode(read_u32(r)?));
        }
        Ok(InteractionDataset::from_parts(
            behaviors,
            user_keys,
            item_keys,
            records,
            test_item,
            validation_item,
        ))
    }

    pub fn save_cache(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_cache(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_cache(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_cache(&mut r)
    }

    pub fn split_manifest(&self) -> SplitManifest {
        let key = |i: Option<usize>| i.map(|i| self.item_keys[i].clone());
        SplitManifest {
            format: "disen-cgcn-split".into(),
            version: DATASET_VERSION,
            target_behavior: self.behaviors[self.target_behavior()].clone(),
            users: (0..self.num_users())
                .map(|u| SplitEntry {
                    user: self.user_keys[u].clone(),
                    test: key(self.test_item[u]),
                    validation: key(self.validation_item[u]),
                })
                .collect(),
        }
    }
}

/// Per-user hold-out listing, written next to the cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub format: String,
    pub version: u32,
    pub target_behavior: String,
    pub users: Vec<SplitEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub user: String,
    pub test: Option<String>,
    pub validation: Option<String>,
}
