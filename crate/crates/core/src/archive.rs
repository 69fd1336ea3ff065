//! Posterior draws persisted as a directory.
//!
//! Layout:
//! - `meta.txt`: `key = value` lines, sorted by key.
//! - `index.txt`: one `name rows cols` line per block, in block order.
//! - `<name>.f64`: little-endian f64, row-major `[draw][flattened block]`.
//! - `locations.csv`: `id,x,y` of the location set the latent blocks refer to.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Result, SfError};
use crate::geometry::Point;

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Block {
    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn rows(&self) -> usize {
        if self.cols == 0 {
            0
        } else {
            self.data.len() / self.cols
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChainArchive {
    pub meta: BTreeMap<String, String>,
    pub blocks: Vec<Block>,
    draws: usize,
    pub location_ids: Vec<String>,
    pub location_coords: Vec<Point>,
}

impl ChainArchive {
    pub fn new(blocks: &[(&str, usize)]) -> Self {
        Self {
            blocks: blocks
                .iter()
                .map(|&(name, cols)| Block {
                    name: name.to_string(),
                    cols,
                    data: Vec::new(),
                })
                .collect(),
            ..Self::default()
        }
    }

    pub fn draws(&self) -> usize {
        self.draws
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| SfError::Archive(format!("metadata key '{key}' missing")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta_str(key)?
            .parse()
            .map_err(|_| SfError::Archive(format!("metadata key '{key}' is not an integer")))
    }

    pub fn meta_list(&self, key: &str) -> Result<Vec<String>> {
        let s = self.meta_str(key)?;
        Ok(if s.is_empty() {
            Vec::new()
        } else {
            s.split(',').map(str::to_string).collect()
        })
    }

    /// Append one draw: `values` holds one row per block, in block order.
    pub fn push_draw(&mut self, values: &[&[f64]]) -> Result<()> {
        if values.len() != self.blocks.len() {
            return Err(SfError::Archive(format!(
                "{} rows supplied for {} blocks",
                values.len(),
                self.blocks.len()
            )));
        }
        for (b, v) in self.blocks.iter_mut().zip(values) {
            if v.len() != b.cols {
                return Err(SfError::Archive(format!(
                    "block '{}' expects {} values, got {}",
                    b.name,
                    b.cols,
                    v.len()
                )));
            }
            b.data.extend_from_slice(v);
        }
        self.draws += 1;
        Ok(())
    }

    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| SfError::Archive(format!("block '{name}' missing")))
    }

    pub fn has_block(&self, name: &str) -> bool {
        self.blocks.iter().any(|b| b.name == name)
    }

    /// Concatenate per-chain archives in order. Metadata and locations come
    /// from the first; block layouts must agree.
    pub fn concat(parts: Vec<ChainArchive>) -> Result<ChainArchive> {
        let mut iter = parts.into_iter();
        let mut out = iter
            .next()
            .ok_or_else(|| SfError::Archive("no chains to concatenate".into()))?;
        for part in iter {
            if part.blocks.len() != out.blocks.len() {
                return Err(SfError::Archive("chain archives have different blocks".into()));
            }
            for (a, b) in out.blocks.iter_mut().zip(part.blocks) {
                if a.name != b.name || a.cols != b.cols {
                    return Err(SfError::Archive(format!("block '{}' layout differs between chains", a.name)));
                }
                a.data.extend(b.data);
            }
            out.draws += part.draws;
        }
        Ok(out)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| SfError::io(dir, e))?;
        let mut meta = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(SfError::Archive(format!("metadata entry '{k}' cannot be serialized")));
            }
            meta.push_str(&format!("{k} = {v}\n"));
        }
        write_file(&dir.join("meta.txt"), meta.as_bytes())?;
        let mut index = String::new();
        for b in &self.blocks {
            index.push_str(&format!("{} {} {}\n", b.name, self.draws, b.cols));
            let mut bytes = Vec::with_capacity(b.data.len() * 8);
            for v in &b.data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            write_file(&dir.join(format!("{}.f64", b.name)), &bytes)?;
        }
        write_file(&dir.join("index.txt"), index.as_bytes())?;
        let mut locs = String::from("id,x,y\n");
        for (id, c) in self.location_ids.iter().zip(&self.location_coords) {
            locs.push_str(&format!("{id},{},{}\n", c[0], c[1]));
        }
        write_file(&dir.join("locations.csv"), locs.as_bytes())
    }

    pub fn read_dir(dir: &Path) -> Result<ChainArchive> {
        let meta_text = read_text(&dir.join("meta.txt"))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| SfError::Archive(format!("bad metadata line '{line}'")))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let mut blocks = Vec::new();
        let mut draws = None;
        for line in read_text(&dir.join("index.txt"))?.lines() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let parsed = match parts.as_slice() {
                [name, rows, cols] => rows.parse::<usize>().ok().zip(cols.parse::<usize>().ok()).map(|rc| (*name, rc)),
                _ => None,
            };
            let (name, (rows, cols)) =
                parsed.ok_or_else(|| SfError::Archive(format!("bad index line '{line}'")))?;
            if *draws.get_or_insert(rows) != rows {
                return Err(SfError::Archive(format!("block '{name}' has {rows} draws, others differ")));
            }
            let path = dir.join(format!("{name}.f64"));
            let bytes = fs::read(&path).map_err(|e| SfError::io(&path, e))?;
            if bytes.len() != rows * cols * 8 {
                return Err(SfError::Archive(format!(
                    "block '{name}' holds {} bytes, expected {}",
                    bytes.len(),
                    rows * cols * 8
                )));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blocks.push(Block {
                name: name.to_string(),
                cols,
                data,
            });
        }
        let mut location_ids = Vec::new();
        let mut location_coords = Vec::new();
        let loc_path = dir.join("locations.csv");
        let text = read_text(&loc_path)?;
        for (k, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| s.parse::<f64>().map_err(|_| SfError::ingest_at(k + 1, format!("bad coordinate '{s}'")));
            if f.len() != 3 {
                return Err(SfError::ingest_at(k + 1, "locations.csv rows need id,x,y"));
            }
            location_ids.push(f[0].to_string());
            location_coords.push([parse(f[1])?, parse(f[2])?]);
        }
        Ok(ChainArchive {
            meta,
            blocks,
            draws: draws.unwrap_or(0),
            location_ids,
            location_coords,
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| SfError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| SfError::io(path, e))
}
