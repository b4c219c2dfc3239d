//! On-disk dataset: `manifest.jsonl` (one line per triplet) plus one raw
//! `f32` tensor per triplet under `tensors/`.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::dataprep::{Label, Task, TaskDataset, TripletSample};
use crate::error::{Error, Result};
use crate::stack::{read_f32s, side_of, write_f32s, Stack};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const TENSOR_DIR: &str = "tensors";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub task: Task,
    pub label: Label,
    pub source_volume_id: String,
    pub slice_indices: [usize; 3],
    pub fold: usize,
    pub folds: usize,
    /// Relative to the dataset directory.
    pub tensor: String,
    pub sha256: String,
}

fn tensor_bytes(stack: &Stack) -> Vec<u8> {
    stack.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Write every dataset into `dir` and return the manifest hash.
pub fn write_dataset(dir: &Path, datasets: &[TaskDataset]) -> Result<String> {
    let tensors = dir.join(TENSOR_DIR);
    std::fs::create_dir_all(&tensors).map_err(|e| Error::io(&tensors, e))?;
    let mut lines = String::new();
    for ds in datasets {
        for (s, &fold) in ds.samples.iter().zip(&ds.folds) {
            let rel = format!("{TENSOR_DIR}/{}.f32", s.id);
            write_f32s(&dir.join(&rel), s.stack.data())?;
            let entry = ManifestEntry {
                id: s.id.clone(),
                task: s.task,
                label: s.label,
                source_volume_id: s.source_volume_id.clone(),
                slice_indices: s.slice_indices,
                fold,
                folds: ds.k,
                tensor: rel,
                sha256: sha256_hex(&tensor_bytes(&s.stack)),
            };
            lines.push_str(&serde_json::to_string(&entry).expect("entry serializes"));
            lines.push('\n');
        }
    }
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, &lines).map_err(|e| Error::io(&path, e))?;
    Ok(sha256_hex(lines.as_bytes()))
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let f = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::malformed(&path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

pub fn manifest_hash(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Load one task's triplets, verifying every tensor digest.
pub fn read_dataset(dir: &Path, task: Task) -> Result<TaskDataset> {
    let entries: Vec<ManifestEntry> = read_manifest(dir)?
        .into_iter()
        .filter(|e| e.task == task)
        .collect();
    if entries.is_empty() {
        return Err(Error::InvalidDataset(format!(
            "no {task} triplets in {}",
            dir.display()
        )));
    }
    let k = entries[0].folds;
    let mut samples = Vec::with_capacity(entries.len());
    let mut folds = Vec::with_capacity(entries.len());
    for e in entries {
        let path = dir.join(&e.tensor);
        let data = read_f32s(&path)?;
        let size =
            side_of(data.len()).ok_or_else(|| Error::malformed(&path, "not a 3 x s x s tensor"))?;
        let stack = Stack::new(size, data)?;
        if sha256_hex(&tensor_bytes(&stack)) != e.sha256 {
            return Err(Error::malformed(
                &path,
                "digest does not match the manifest",
            ));
        }
        if e.folds != k || e.fold >= k {
            return Err(Error::malformed(
                dir.join(MANIFEST_FILE),
                format!("{}: fold {} of {}", e.id, e.fold, e.folds),
            ));
        }
        folds.push(e.fold);
        samples.push(TripletSample {
            id: e.id,
            stack,
            label: e.label,
            task: e.task,
            source_volume_id: e.source_volume_id,
            slice_indices: e.slice_indices,
        });
    }
    Ok(TaskDataset {
        task,
        samples,
        folds,
        k,
    })
}
