//! Volume ingestion: NIfTI-1 (`.nii`, `.nii.gz`) and a raw little-endian
//! `f32` array with a JSON sidecar of the same stem.

use std::fs;
use std::path::{Path, PathBuf};

use nifti::volume::RandomAccessNiftiVolume;
use nifti::{NiftiHeader, NiftiObject, NiftiVolume, ReaderOptions};
use serde::{Deserialize, Serialize};

use super::VolumeStack;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    #[default]
    Minmax,
    None,
}

/// Orientation of the slice axis in input files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceOrder {
    /// First stored slice is the apex end.
    #[default]
    ApexFirst,
    /// First stored slice is the basal end; reversed on load.
    BaseFirst,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSidecar {
    /// `[slices, height, width]`
    shape: [usize; 3],
    #[serde(default = "default_spacing")]
    spacing: [f64; 2],
    #[serde(default = "default_thickness")]
    slice_thickness: f64,
}

fn default_spacing() -> [f64; 2] {
    [1.0, 1.0]
}

fn default_thickness() -> f64 {
    1.0
}

fn unreadable(path: &Path, reason: impl ToString) -> Error {
    Error::UnreadableFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn volume_id(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    for ext in [".nii.gz", ".nii", ".raw"] {
        if let Some(stem) = name.strip_suffix(ext) {
            return stem.to_string();
        }
    }
    name
}

fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

/// Load one volume. Slice order is taken as stored (first = apex); see
/// [`SliceOrder`] for base-first inputs.
pub fn load_volume(path: &Path, normalization: Normalization) -> Result<VolumeStack> {
    load_volume_ordered(path, normalization, SliceOrder::ApexFirst)
}

pub fn load_volume_ordered(
    path: &Path,
    normalization: Normalization,
    order: SliceOrder,
) -> Result<VolumeStack> {
    if !path.is_file() {
        return Err(unreadable(path, "no such file"));
    }
    let name = path.to_string_lossy();
    let (h, w, mut slices, spacing, thickness) =
        if name.ends_with(".nii") || name.ends_with(".nii.gz") {
            read_nifti(path)?
        } else {
            read_raw(path)?
        };
    if order == SliceOrder::BaseFirst {
        slices.reverse();
    }
    let mut v = VolumeStack::new(volume_id(path), h, w, slices, spacing, thickness)?;
    if normalization == Normalization::Minmax {
        v.normalize_minmax();
    }
    Ok(v)
}

type Decoded = (usize, usize, Vec<Vec<f32>>, (f64, f64), f64);

fn read_raw(path: &Path) -> Result<Decoded> {
    let side = sidecar_path(path);
    let meta: RawSidecar = serde_json::from_slice(
        &fs::read(&side)
            .map_err(|e| unreadable(path, format!("sidecar {}: {e}", side.display())))?,
    )
    .map_err(|e| unreadable(path, format!("sidecar: {e}")))?;
    let bytes = fs::read(path).map_err(|e| unreadable(path, e))?;
    let [n, h, w] = meta.shape;
    if bytes.len() != n * h * w * 4 {
        return Err(unreadable(
            path,
            format!("{} bytes for shape {:?}", bytes.len(), meta.shape),
        ));
    }
    let vals: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let slices = vals.chunks(h * w).map(<[f32]>::to_vec).collect();
    Ok((
        h,
        w,
        slices,
        (meta.spacing[0], meta.spacing[1]),
        meta.slice_thickness,
    ))
}

fn read_nifti(path: &Path) -> Result<Decoded> {
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| unreadable(path, e))?;
    let header: &NiftiHeader = obj.header();
    let spacing = (header.pixdim[2] as f64, header.pixdim[1] as f64);
    let thickness = header.pixdim[3] as f64;
    let vol = obj.into_volume();
    let dim = vol.dim().to_vec();
    if dim.len() < 3 {
        return Err(unreadable(
            path,
            format!("expected a 3D volume, got dims {dim:?}"),
        ));
    }
    let (w, h, n) = (dim[0] as usize, dim[1] as usize, dim[2] as usize);
    // extra axes (cardiac phases) collapse to their first index
    let mut coord = vec![0u16; dim.len()];
    let mut slices = Vec::with_capacity(n);
    for k in 0..n {
        let mut s = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                coord[0] = x as u16;
                coord[1] = y as u16;
                coord[2] = k as u16;
                s.push(vol.get_f32(&coord).map_err(|e| unreadable(path, e))?);
            }
        }
        slices.push(s);
    }
    Ok((h, w, slices, spacing, thickness))
}

/// Write a volume as `<path>` (raw `f32` LE, slice-major) plus its JSON sidecar.
pub fn save_raw_volume(v: &VolumeStack, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(v.n() * v.height() * v.width() * 4);
    for s in v.slices() {
        for x in s {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta = RawSidecar {
        shape: [v.n(), v.height(), v.width()],
        spacing: [v.pixel_spacing.0, v.pixel_spacing.1],
        slice_thickness: v.slice_thickness,
    };
    let side = sidecar_path(path);
    fs::write(
        &side,
        serde_json::to_vec_pretty(&meta).expect("plain struct"),
    )
    .map_err(|e| Error::io(&side, e))
}
