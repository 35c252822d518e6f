//! Volumetric containers, dataset manifests, and RVOL file I/O.
//!
//! All grids use x-fastest ordering: the linear index of voxel `(x, y, z)`
//! is `x + nx * (y + ny * z)`. Every module in this crate assumes that
//! ordering.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magic bytes opening every RVOL file.
pub const RVOL_MAGIC: &[u8; 6] = b"RVOL1\0";

const DTYPE_MASK: u8 = 0;
const DTYPE_F32: u8 = 1;

/// Grid geometry shared by images, masks, and label maps: voxel counts and
/// physical spacing in millimeters per voxel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeom {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl GridGeom {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Validation(format!(
                "dims must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::Validation(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        Ok(GridGeom { dims, spacing })
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Physical volume of one voxel in mm³.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    pub fn same_grid(&self, other: &GridGeom) -> bool {
        self.dims == other.dims && self.spacing == other.spacing
    }
}

/// Dense 3D scalar field with physical spacing. Carrier for images,
/// probability maps, and weight grids.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    geom: GridGeom,
    values: Vec<f32>,
}

impl VoxelGrid {
    pub fn new(geom: GridGeom, values: Vec<f32>) -> Result<Self> {
        if values.len() != geom.voxel_count() {
            return Err(Error::Validation(format!(
                "value count {} does not match dims {:?}",
                values.len(),
                geom.dims
            )));
        }
        Ok(VoxelGrid { geom, values })
    }

    pub fn zeros(geom: GridGeom) -> Self {
        let n = geom.voxel_count();
        VoxelGrid {
            geom,
            values: vec![0.0; n],
        }
    }

    pub fn geom(&self) -> &GridGeom {
        &self.geom
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    /// Crop a congruent window. The window must fit inside the grid.
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<VoxelGrid> {
        let values = crop_values(&self.geom, &self.values, origin, size)?;
        let geom = GridGeom::new(size, self.geom.spacing)?;
        Ok(VoxelGrid { geom, values })
    }
}

/// Binary ground-truth volume. Values are strictly 0 or 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    geom: GridGeom,
    values: Vec<u8>,
}

impl Mask {
    pub fn new(geom: GridGeom, values: Vec<u8>) -> Result<Self> {
        if values.len() != geom.voxel_count() {
            return Err(Error::Validation(format!(
                "value count {} does not match dims {:?}",
                values.len(),
                geom.dims
            )));
        }
        if let Some(pos) = values.iter().position(|&v| v > 1) {
            return Err(Error::Validation(format!(
                "mask voxel {} has value {}, expected 0 or 1",
                pos, values[pos]
            )));
        }
        Ok(Mask { geom, values })
    }

    pub fn zeros(geom: GridGeom) -> Self {
        let n = geom.voxel_count();
        Mask {
            geom,
            values: vec![0; n],
        }
    }

    pub fn geom(&self) -> &GridGeom {
        &self.geom
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn positive_count(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    /// Linear indices of all positive voxels, in scan order.
    pub fn positive_indices(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v == 1).then_some(i))
            .collect()
    }

    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Mask> {
        let values = crop_values(&self.geom, &self.values, origin, size)?;
        let geom = GridGeom::new(size, self.geom.spacing)?;
        Ok(Mask { geom, values })
    }
}

/// A [`VoxelGrid`] whose values all lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap(VoxelGrid);

impl ProbabilityMap {
    pub fn new(grid: VoxelGrid) -> Result<Self> {
        if let Some(pos) = grid
            .values
            .iter()
            .position(|&v| !(0.0..=1.0).contains(&v) || v.is_nan())
        {
            return Err(Error::Validation(format!(
                "probability at voxel {} is {}, outside [0, 1]",
                pos, grid.values[pos]
            )));
        }
        Ok(ProbabilityMap(grid))
    }

    pub fn geom(&self) -> &GridGeom {
        self.0.geom()
    }

    pub fn values(&self) -> &[f32] {
        self.0.values()
    }

    pub fn as_grid(&self) -> &VoxelGrid {
        &self.0
    }

    pub fn into_grid(self) -> VoxelGrid {
        self.0
    }
}

fn crop_values<T: Copy>(
    geom: &GridGeom,
    values: &[T],
    origin: [usize; 3],
    size: [usize; 3],
) -> Result<Vec<T>> {
    for k in 0..3 {
        if size[k] == 0 || origin[k] + size[k] > geom.dims[k] {
            return Err(Error::Argument(format!(
                "crop window origin {origin:?} size {size:?} does not fit in dims {:?}",
                geom.dims
            )));
        }
    }
    let mut out = Vec::with_capacity(size[0] * size[1] * size[2]);
    for z in 0..size[2] {
        for y in 0..size[1] {
            let row = geom.index(origin[0], origin[1] + y, origin[2] + z);
            out.extend_from_slice(&values[row..row + size[0]]);
        }
    }
    Ok(out)
}

/// Either payload a volume file can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Grid(VoxelGrid),
    Mask(Mask),
}

impl Volume {
    pub fn geom(&self) -> &GridGeom {
        match self {
            Volume::Grid(g) => g.geom(),
            Volume::Mask(m) => m.geom(),
        }
    }

    pub fn into_grid(self) -> Result<VoxelGrid> {
        match self {
            Volume::Grid(g) => Ok(g),
            Volume::Mask(_) => Err(Error::Argument(
                "expected a float volume, found a mask".into(),
            )),
        }
    }

    pub fn into_mask(self) -> Result<Mask> {
        match self {
            Volume::Mask(m) => Ok(m),
            Volume::Grid(_) => Err(Error::Argument(
                "expected a mask volume, found a float grid".into(),
            )),
        }
    }
}

/// Read an RVOL file. The dtype byte decides whether a [`Mask`] or a
/// [`VoxelGrid`] comes back; masks are validated on read.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; 43];
    file.read_exact(&mut header).map_err(|_| Error::Format {
        path: path.into(),
        reason: "file shorter than the 43-byte header".into(),
    })?;
    if &header[..6] != RVOL_MAGIC {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("bad magic {:?}", &header[..6]),
        });
    }
    let dtype = header[6];
    let mut dims = [0usize; 3];
    for k in 0..3 {
        let off = 7 + 4 * k;
        dims[k] = u32::from_le_bytes(header[off..off + 4].try_into().unwrap()) as usize;
    }
    let mut spacing = [0f64; 3];
    for k in 0..3 {
        let off = 19 + 8 * k;
        spacing[k] = f64::from_le_bytes(header[off..off + 8].try_into().unwrap());
    }
    let geom = GridGeom::new(dims, spacing)?;
    let n = geom.voxel_count();

    let mut payload = Vec::new();
    file.read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;

    match dtype {
        DTYPE_MASK => {
            if payload.len() != n {
                return Err(Error::Truncated {
                    path: path.into(),
                    expected: n,
                    found: payload.len(),
                });
            }
            Ok(Volume::Mask(Mask::new(geom, payload)?))
        }
        DTYPE_F32 => {
            if payload.len() != 4 * n {
                return Err(Error::Truncated {
                    path: path.into(),
                    expected: 4 * n,
                    found: payload.len(),
                });
            }
            let values = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Volume::Grid(VoxelGrid::new(geom, values)?))
        }
        other => Err(Error::Format {
            path: path.into(),
            reason: format!("unknown dtype code {other}"),
        }),
    }
}

fn encode_header(dtype: u8, geom: &GridGeom) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(43);
    out.extend_from_slice(RVOL_MAGIC);
    out.push(dtype);
    for &d in &geom.dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::Validation(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &s in &geom.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Write a float grid as RVOL. Byte-deterministic for identical inputs.
pub fn write_grid(grid: &VoxelGrid, path: &Path) -> Result<()> {
    let mut bytes = encode_header(DTYPE_F32, grid.geom())?;
    bytes.reserve(4 * grid.values().len());
    for v in grid.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &bytes)
}

/// Write a mask as RVOL.
pub fn write_mask(mask: &Mask, path: &Path) -> Result<()> {
    let mut bytes = encode_header(DTYPE_MASK, mask.geom())?;
    bytes.extend_from_slice(mask.values());
    write_bytes(path, &bytes)
}

/// Write either volume kind.
pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    match volume {
        Volume::Grid(g) => write_grid(g, path),
        Volume::Mask(m) => write_mask(m, path),
    }
}

/// One case entry of a dataset manifest. Paths are relative to the manifest
/// file's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub image: PathBuf,
    pub gt: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prob: Option<PathBuf>,
}

/// Split tag of a manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
    Clinical,
}

/// JSON dataset manifest listing cases of one split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub cases: Vec<CaseEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for case in &self.cases {
            if !seen.insert(case.id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate case id {:?} in manifest",
                    case.id
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Fraction of positive voxels pooled over a set of masks — the global
/// positive-class fraction used to scale lesion weights.
pub fn positive_fraction(masks: &[&Mask]) -> Result<f64> {
    if masks.is_empty() {
        return Err(Error::Argument(
            "positive_fraction needs at least one mask".into(),
        ));
    }
    let mut positives: u64 = 0;
    let mut total: u64 = 0;
    for mask in masks {
        positives += mask.positive_count() as u64;
        total += mask.geom().voxel_count() as u64;
    }
    Ok(positives as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn geom(d: usize) -> GridGeom {
        GridGeom::new([d, d, d], [1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn round_trip_grid() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("g.rvol");
        let grid = VoxelGrid::new(geom(4), vec![0.0; 64]).unwrap();
        write_grid(&grid, &path).unwrap();
        let back = read_volume(&path).unwrap().into_grid().unwrap();
        assert_eq!(grid, back);
    }

    #[test]
    fn round_trip_mask_with_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.rvol");
        let mut values = vec![0u8; 27];
        values[13] = 1;
        let mask = Mask::new(geom(3), values).unwrap();
        write_mask(&mask, &path).unwrap();
        let back = read_volume(&path).unwrap().into_mask().unwrap();
        assert_eq!(mask, back);
    }

    #[test]
    fn payload_bytes_of_half() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("h.rvol");
        let grid = VoxelGrid::new(geom(1), vec![0.5]).unwrap();
        write_grid(&grid, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 43 + 4);
        assert_eq!(&bytes[43..], &[0x00, 0x00, 0x00, 0x3F]);
    }

    #[test]
    fn deterministic_bytes() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("a.rvol");
        let b = dir.path().join("b.rvol");
        let grid = VoxelGrid::new(geom(3), (0..27).map(|i| i as f32).collect()).unwrap();
        write_grid(&grid, &a).unwrap();
        write_grid(&grid, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.rvol");
        let mask = Mask::new(geom(2), vec![0; 8]).unwrap();
        write_mask(&mask, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(43 + 7);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(Error::Truncated {
                expected: 8,
                found: 7,
                ..
            })
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.rvol");
        fs::write(&path, b"NOTVOL\x01aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa").unwrap();
        assert!(matches!(read_volume(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn mask_value_two_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m2.rvol");
        let mask = Mask::new(geom(2), vec![0; 8]).unwrap();
        write_mask(&mask, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[43] = 2;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn negative_spacing_rejected() {
        assert!(GridGeom::new([2, 2, 2], [1.0, -1.0, 1.0]).is_err());
    }

    #[test]
    fn positive_fraction_examples() {
        let g = geom(10);
        let mut v = vec![0u8; 1000];
        for slot in v.iter_mut().take(12) {
            *slot = 1;
        }
        let a = Mask::new(g, v).unwrap();
        assert_eq!(positive_fraction(&[&a]).unwrap(), 0.012);

        let zero = Mask::zeros(g);
        assert_eq!(positive_fraction(&[&zero, &zero]).unwrap(), 0.0);

        let mut v2 = vec![0u8; 1000];
        for slot in v2.iter_mut().take(24) {
            *slot = 1;
        }
        let b = Mask::new(g, v2).unwrap();
        assert_eq!(positive_fraction(&[&a, &b]).unwrap(), 0.018);
        // order invariance
        assert_eq!(
            positive_fraction(&[&b, &a]).unwrap(),
            positive_fraction(&[&a, &b]).unwrap()
        );
    }

    #[test]
    fn positive_fraction_empty_errors() {
        assert!(positive_fraction(&[]).is_err());
    }

    #[test]
    fn crop_matches_manual_window() {
        let g = GridGeom::new([4, 3, 2], [1.0, 1.0, 1.0]).unwrap();
        let grid = VoxelGrid::new(g, (0..24).map(|i| i as f32).collect()).unwrap();
        let c = grid.crop([1, 1, 0], [2, 2, 2]).unwrap();
        let expect: Vec<f32> = vec![5.0, 6.0, 9.0, 10.0, 17.0, 18.0, 21.0, 22.0];
        assert_eq!(c.values(), expect.as_slice());
    }

    #[test]
    fn manifest_duplicate_ids_rejected() {
        let m = DatasetManifest {
            split: Split::Train,
            cases: vec![
                CaseEntry {
                    id: "c1".into(),
                    image: "a.rvol".into(),
                    gt: "b.rvol".into(),
                    prob: None,
                },
                CaseEntry {
                    id: "c1".into(),
                    image: "c.rvol".into(),
                    gt: "d.rvol".into(),
                    prob: None,
                },
            ],
        };
        assert!(m.validate().is_err());
    }
}
