//! Volumes, masks, and their raw on-disk encoding.
//!
//! Volumes are stored as raw little-endian f32 arrays next to a JSON sidecar
//! describing shape and provenance; masks use raw u8. All in-memory compute is
//! f64 — the f32 encoding is the interchange format.

use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use crate::autodiff::Arr;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Sagittal,
    Coronal,
    Axial,
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Sagittal, Orientation::Coronal, Orientation::Axial];

    pub fn index(self) -> usize {
        match self {
            Orientation::Sagittal => 0,
            Orientation::Coronal => 1,
            Orientation::Axial => 2,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Orientation::Sagittal => "sag",
            Orientation::Coronal => "cor",
            Orientation::Axial => "ax",
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Orientation::Sagittal => "sagittal",
            Orientation::Coronal => "coronal",
            Orientation::Axial => "axial",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sagittal" | "sag" => Ok(Orientation::Sagittal),
            "coronal" | "cor" => Ok(Orientation::Coronal),
            "axial" | "ax" => Ok(Orientation::Axial),
            other => Err(Error::Validation(format!("unknown orientation {other:?}"))),
        }
    }
}

/// Spatial resolution profile (slices, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Resolution {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Resolution { d, h, w }
    }

    pub fn voxels(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn volume_shape(&self) -> [usize; 4] {
        [1, self.d, self.h, self.w]
    }
}

/// Single-channel intensity volume in [-1, 1], tagged with its plane.
#[derive(Clone, Debug)]
pub struct VolumeTensor {
    pub data: Arr,
    pub orientation: Orientation,
    pub study_id: String,
    pub scan_id: String,
}

impl VolumeTensor {
    pub fn resolution(&self) -> Resolution {
        let s = self.data.shape();
        Resolution::new(s[1], s[2], s[3])
    }

    pub fn assert_preprocessed(&self, profile: Resolution) -> Result<()> {
        let s = self.data.shape();
        if s != profile.volume_shape() {
            return Err(Error::Shape(format!(
                "volume {} has shape {s:?}, expected {:?}",
                self.scan_id,
                profile.volume_shape()
            )));
        }
        if !self.data.iter().all(|v| (-1.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!("volume {} leaves [-1, 1]", self.scan_id)));
        }
        Ok(())
    }
}

/// Per-voxel class labels; 0 is background, classes form a contiguous range.
#[derive(Clone, Debug, PartialEq)]
pub struct SegMask {
    pub classes: ndarray::ArrayD<u8>,
}

impl SegMask {
    pub fn n_foreground_classes(&self) -> usize {
        self.classes.iter().copied().max().unwrap_or(0) as usize
    }

    pub fn assert_matches(&self, volume: &VolumeTensor) -> Result<()> {
        let vs = volume.data.shape();
        if self.classes.shape() != &vs[1..] {
            return Err(Error::Shape(format!(
                "mask shape {:?} does not match volume {:?}",
                self.classes.shape(),
                &vs[1..]
            )));
        }
        Ok(())
    }
}

// ---- raw tensor files ----

pub fn write_f32_raw(path: &Path, data: &Arr) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f32_raw(path: &Path, shape: &[usize]) -> Result<Arr> {
    let bytes = fs::read(path)?;
    let expected: usize = shape.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::Shape(format!(
            "{} holds {} bytes, shape {shape:?} needs {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Arr::from_shape_vec(IxDyn(shape), values).unwrap())
}

pub fn write_u8_raw(path: &Path, data: &ndarray::ArrayD<u8>) -> Result<()> {
    let bytes: Vec<u8> = data.iter().copied().collect();
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_u8_raw(path: &Path, shape: &[usize]) -> Result<ndarray::ArrayD<u8>> {
    let bytes = fs::read(path)?;
    let expected: usize = shape.iter().product();
    if bytes.len() != expected {
        return Err(Error::Shape(format!(
            "{} holds {} bytes, shape {shape:?} needs {expected}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(ndarray::ArrayD::from_shape_vec(IxDyn(shape), bytes).unwrap())
}

/// Sidecar for a stored volume.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VolumeSidecar {
    pub shape: Vec<usize>,
    pub orientation: Orientation,
    pub dtype: String,
    pub study_id: String,
    pub scan_id: String,
}

/// Sidecar for a stored mask.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub scan_id: String,
}

pub fn save_volume(dir: &Path, volume: &VolumeTensor) -> Result<()> {
    fs::create_dir_all(dir)?;
    let sidecar = VolumeSidecar {
        shape: volume.data.shape().to_vec(),
        orientation: volume.orientation,
        dtype: "f32le".to_string(),
        study_id: volume.study_id.clone(),
        scan_id: volume.scan_id.clone(),
    };
    write_f32_raw(&dir.join(format!("{}.f32", volume.scan_id)), &volume.data)?;
    fs::write(
        dir.join(format!("{}.json", volume.scan_id)),
        serde_json::to_vec_pretty(&sidecar)?,
    )?;
    Ok(())
}

pub fn load_volume(dir: &Path, scan_id: &str) -> Result<VolumeTensor> {
    let sidecar: VolumeSidecar =
        serde_json::from_slice(&fs::read(dir.join(format!("{scan_id}.json")))?)?;
    let data = read_f32_raw(&dir.join(format!("{scan_id}.f32")), &sidecar.shape)?;
    Ok(VolumeTensor {
        data,
        orientation: sidecar.orientation,
        study_id: sidecar.study_id,
        scan_id: sidecar.scan_id.clone(),
    })
}

pub fn save_mask(dir: &Path, scan_id: &str, mask: &SegMask) -> Result<()> {
    fs::create_dir_all(dir)?;
    let sidecar = MaskSidecar {
        shape: mask.classes.shape().to_vec(),
        dtype: "u8le".to_string(),
        scan_id: scan_id.to_string(),
    };
    write_u8_raw(&dir.join(format!("{scan_id}.mask.u8")), &mask.classes)?;
    fs::write(
        dir.join(format!("{scan_id}.mask.json")),
        serde_json::to_vec_pretty(&sidecar)?,
    )?;
    Ok(())
}

pub fn load_mask(dir: &Path, scan_id: &str) -> Result<SegMask> {
    let sidecar: MaskSidecar =
        serde_json::from_slice(&fs::read(dir.join(format!("{scan_id}.mask.json")))?)?;
    let classes = read_u8_raw(&dir.join(format!("{scan_id}.mask.u8")), &sidecar.shape)?;
    Ok(SegMask { classes })
}

/// Bilinear resize of one 2-d slice with half-pixel centre alignment.
pub fn resize_bilinear_2d(src: &ndarray::ArrayView2<f64>, out_h: usize, out_w: usize) -> ndarray::Array2<f64> {
    let (h, w) = src.dim();
    let plan = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let ratio = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
            })
            .collect()
    };
    let rows = plan(h, out_h);
    let cols = plan(w, out_w);
    let mut out = ndarray::Array2::<f64>::zeros((out_h, out_w));
    for (oi, &(r0, r1, tr)) in rows.iter().enumerate() {
        for (oj, &(c0, c1, tc)) in cols.iter().enumerate() {
            out[[oi, oj]] = (1.0 - tr) * ((1.0 - tc) * src[[r0, c0]] + tc * src[[r0, c1]])
                + tr * ((1.0 - tc) * src[[r1, c0]] + tc * src[[r1, c1]]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use tempfile::tempdir;

    #[test]
    fn volume_round_trip_preserves_f32_payload() {
        let dir = tempdir().unwrap();
        let data = Arr::from_shape_vec(
            IxDyn(&[1, 2, 2, 2]),
            vec![-1.0, -0.5, 0.0, 0.125, 0.25, 0.5, 0.75, 1.0],
        )
        .unwrap();
        let v = VolumeTensor {
            data,
            orientation: Orientation::Coronal,
            study_id: "p1".into(),
            scan_id: "p1-cor-0".into(),
        };
        save_volume(dir.path(), &v).unwrap();
        let back = load_volume(dir.path(), "p1-cor-0").unwrap();
        assert_eq!(back.orientation, Orientation::Coronal);
        assert_eq!(back.data, v.data);
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempdir().unwrap();
        let classes = ndarray::ArrayD::from_shape_vec(IxDyn(&[2, 2, 2]), vec![0u8, 1, 2, 3, 4, 0, 1, 2]).unwrap();
        let m = SegMask { classes };
        save_mask(dir.path(), "s", &m).unwrap();
        let back = load_mask(dir.path(), "s").unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let src = ndarray::array![[1.0, 2.0], [3.0, 4.0]];
        let same = resize_bilinear_2d(&src.view(), 2, 2);
        assert_eq!(same, src);
        let flat = ndarray::Array2::from_elem((3, 5), 7.0);
        let up = resize_bilinear_2d(&flat.view(), 9, 11);
        for v in up.iter() {
            assert!((v - 7.0).abs() < 1e-12);
        }
    }
}
