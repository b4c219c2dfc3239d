use super::{center_crop_square, resize_bilinear, Label, Task, TripletSample, VolumeStack};
use crate::error::{Error, Result};
use crate::stack::Stack;

/// 1-based slice indices of the triplet for `(task, label)` in an `n`-slice volume.
///
/// Apex: `P = (1, 2, 3)`, `N = (2, 3, 4)`. Basal: `P = (n-2, n-1, n)`, `N = (n-3, n-2, n-1)`.
pub fn triplet_indices(task: Task, label: Label, n: usize) -> Result<[usize; 3]> {
    if !(8..=10).contains(&n) {
        return Err(Error::SliceCountOutOfRange(n));
    }
    Ok(match (task, label) {
        (Task::Apex, Label::P) => [1, 2, 3],
        (Task::Apex, Label::N) => [2, 3, 4],
        (Task::Basal, Label::P) => [n - 2, n - 1, n],
        (Task::Basal, Label::N) => [n - 3, n - 2, n - 1],
    })
}

/// The four labelled triplets of a volume, in the order apex-P, apex-N, basal-P, basal-N.
/// Every slice is centre-cropped to a square and resized to `target x target`.
pub fn extract_triplets(v: &VolumeStack, target: usize) -> Result<[TripletSample; 4]> {
    let make = |task: Task, label: Label| -> Result<TripletSample> {
        let idx = triplet_indices(task, label, v.n())?;
        let mut data = Vec::with_capacity(3 * target * target);
        for &i in &idx {
            let (s, sq) = center_crop_square(v.height(), v.width(), v.slice(i));
            data.extend(resize_bilinear(&sq, s, target));
        }
        Ok(TripletSample {
            id: format!("{}-{}-{:?}", v.volume_id, task, label),
            stack: Stack::new(target, data)?,
            label,
            task,
            source_volume_id: v.volume_id.clone(),
            slice_indices: idx,
        })
    };
    Ok([
        make(Task::Apex, Label::P)?,
        make(Task::Apex, Label::N)?,
        make(Task::Basal, Label::P)?,
        make(Task::Basal, Label::N)?,
    ])
}
