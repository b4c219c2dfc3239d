//! The true-positive corpus: stacks paired with their explanation masks.
//!
//! On disk: `index.json` listing the pair ids in order, and one directory per
//! pair holding `stack.raw`, `mask.raw` (both `f32` LE, `3 x s x s`) and `meta.json`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataprep::Task;
use crate::error::{Error, Result};
use crate::stack::{read_f32s, side_of, write_f32s, Mask, Stack};

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusPair {
    pub sample_id: String,
    pub source_volume_id: String,
    pub slice_indices: [usize; 3],
    pub stack: Stack,
    pub mask: Mask,
    pub top_superpixel_id: usize,
    pub coefficients: Vec<f64>,
    pub surrogate_r2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskCorpus {
    pub task: Task,
    pub pairs: Vec<CorpusPair>,
}

#[derive(Serialize, Deserialize)]
struct Index {
    task: Task,
    ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct PairMeta {
    sample_id: String,
    source_volume_id: String,
    slice_indices: [usize; 3],
    shape: [usize; 3],
    top_id: usize,
    coefficients: Vec<f64>,
    r2: f64,
}

fn pair_dir_name(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '+' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn save_corpus(corpus: &MaskCorpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for p in &corpus.pairs {
        let d = dir.join(pair_dir_name(&p.sample_id));
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        write_f32s(&d.join("stack.raw"), p.stack.data())?;
        write_f32s(&d.join("mask.raw"), &p.mask.to_f32())?;
        let s = p.stack.size();
        let meta = PairMeta {
            sample_id: p.sample_id.clone(),
            source_volume_id: p.source_volume_id.clone(),
            slice_indices: p.slice_indices,
            shape: [3, s, s],
            top_id: p.top_superpixel_id,
            coefficients: p.coefficients.clone(),
            r2: p.surrogate_r2,
        };
        let path = d.join("meta.json");
        fs::write(
            &path,
            serde_json::to_vec_pretty(&meta).expect("plain struct"),
        )
        .map_err(|e| Error::io(&path, e))?;
    }
    let index = Index {
        task: corpus.task,
        ids: corpus.pairs.iter().map(|p| p.sample_id.clone()).collect(),
    };
    let path = dir.join("index.json");
    fs::write(
        &path,
        serde_json::to_vec_pretty(&index).expect("plain struct"),
    )
    .map_err(|e| Error::io(&path, e))
}

pub fn load_corpus(dir: &Path) -> Result<MaskCorpus> {
    let path = dir.join("index.json");
    let index: Index = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)
        .map_err(|e| Error::malformed(&path, e))?;
    let mut pairs = Vec::with_capacity(index.ids.len());
    for id in &index.ids {
        let d = dir.join(pair_dir_name(id));
        let mpath = d.join("meta.json");
        let meta: PairMeta =
            serde_json::from_slice(&fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?)
                .map_err(|e| Error::malformed(&mpath, e))?;
        let data = read_f32s(&d.join("stack.raw"))?;
        let size = side_of(data.len())
            .ok_or_else(|| Error::malformed(d.join("stack.raw"), "not 3 x s x s"))?;
        let bits: Vec<bool> = read_f32s(&d.join("mask.raw"))?
            .iter()
            .map(|&v| v >= 0.5)
            .collect();
        pairs.push(CorpusPair {
            sample_id: meta.sample_id,
            source_volume_id: meta.source_volume_id,
            slice_indices: meta.slice_indices,
            stack: Stack::new(size, data)?,
            mask: Mask::new(size, bits)?,
            top_superpixel_id: meta.top_id,
            coefficients: meta.coefficients,
            surrogate_r2: meta.r2,
        });
    }
    Ok(MaskCorpus {
        task: index.task,
        pairs,
    })
}
