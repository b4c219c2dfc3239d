use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Label, TaskDataset, TripletSample};
use crate::error::{Error, Result};

/// Assign `k` folds grouped by source volume, so both triplets of a volume land
/// in the same fold. Volumes are shuffled with `seed` and dealt round-robin,
/// which keeps fold sizes within one volume of each other.
pub fn make_folds(samples: Vec<TripletSample>, k: usize, seed: u64) -> Result<TaskDataset> {
    let task = match samples.first() {
        Some(s) => s.task,
        None => return Err(Error::InvalidDataset("no samples".into())),
    };
    if k < 2 {
        return Err(Error::InvalidDataset(format!("k = {k} folds")));
    }
    if let Some(s) = samples.iter().find(|s| s.task != task) {
        return Err(Error::InvalidDataset(format!(
            "mixed tasks: {} is {} but dataset is {}",
            s.id, s.task, task
        )));
    }
    let mut by_volume: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for s in &samples {
        let e = by_volume.entry(&s.source_volume_id).or_default();
        match s.label {
            Label::P => e.0 += 1,
            Label::N => e.1 += 1,
        }
    }
    if let Some((v, _)) = by_volume.iter().find(|(_, &c)| c != (1, 1)) {
        return Err(Error::InvalidDataset(format!(
            "volume {v} must contribute exactly one P and one N triplet"
        )));
    }
    if by_volume.len() < k {
        return Err(Error::TooFewVolumes(by_volume.len(), k));
    }
    let mut volumes: Vec<&str> = by_volume.keys().copied().collect();
    volumes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of: BTreeMap<String, usize> = volumes
        .iter()
        .enumerate()
        .map(|(i, v)| (v.to_string(), i % k))
        .collect();
    let folds = samples
        .iter()
        .map(|s| fold_of[&s.source_volume_id])
        .collect();
    Ok(TaskDataset {
        task,
        samples,
        folds,
        k,
    })
}
