//! Connected-component decomposition of binary masks and probability-map
//! thresholding.
//!
//! Components are labeled in scan order: the first positive voxel found in
//! linear (x-fastest) order seeds component 1, and so on. Background is
//! component 0. The same input always produces the same labeling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{GridGeom, Mask, ProbabilityMap, VoxelGrid};

/// Voxel adjacency in 3D: faces only, or faces + edges + corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    #[serde(rename = "6")]
    Six,
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    /// Neighbor offsets as (dx, dy, dz) triples.
    pub fn offsets(self) -> Vec<[i64; 3]> {
        match self {
            Connectivity::Six => vec![
                [-1, 0, 0],
                [1, 0, 0],
                [0, -1, 0],
                [0, 1, 0],
                [0, 0, -1],
                [0, 0, 1],
            ],
            Connectivity::TwentySix => {
                let mut out = Vec::with_capacity(26);
                for dz in -1..=1i64 {
                    for dy in -1..=1i64 {
                        for dx in -1..=1i64 {
                            if dx != 0 || dy != 0 || dz != 0 {
                                out.push([dx, dy, dz]);
                            }
                        }
                    }
                }
                out
            }
        }
    }
}

impl std::fmt::Display for Connectivity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Connectivity::Six => write!(f, "6"),
            Connectivity::TwentySix => write!(f, "26"),
        }
    }
}

impl std::str::FromStr for Connectivity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "6" => Ok(Connectivity::Six),
            "26" => Ok(Connectivity::TwentySix),
            other => Err(Error::Argument(format!(
                "connectivity must be 6 or 26, got {other:?}"
            ))),
        }
    }
}

/// Connected-component decomposition of a mask. Label 0 is background,
/// labels 1..=K are lesions in scan order; `sizes[i]` is the voxel count of
/// component i.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    geom: GridGeom,
    labels: Vec<u32>,
    sizes: Vec<usize>,
    connectivity: Connectivity,
}

impl LabelMap {
    pub fn geom(&self) -> &GridGeom {
        &self.geom
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Voxel counts `|C_0|..|C_K|`.
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Number of lesion components K.
    pub fn component_count(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn connectivity(&self) -> Connectivity {
        self.connectivity
    }

    /// Linear voxel indices of component `label`, in scan order.
    pub fn component_voxels(&self, label: u32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == label).then_some(i))
            .collect()
    }

    /// Sphere-equivalent diameter of a lesion component in millimeters.
    pub fn equivalent_diameter_mm(&self, label: u32) -> f64 {
        let volume = self.sizes[label as usize] as f64 * self.geom.voxel_volume_mm3();
        (6.0 * volume / std::f64::consts::PI).cbrt()
    }

    /// Labels encoded as a float grid, for RVOL export.
    pub fn to_grid(&self) -> VoxelGrid {
        let values = self.labels.iter().map(|&l| l as f32).collect();
        VoxelGrid::new(self.geom, values).expect("label map is well formed")
    }
}

/// Decompose a mask into maximal connected sets of positive voxels.
pub fn label_components(mask: &Mask, connectivity: Connectivity) -> LabelMap {
    let geom = *mask.geom();
    let [nx, ny, nz] = geom.dims;
    let values = mask.values();
    let mut labels = vec![0u32; values.len()];
    let mut sizes = vec![0usize];
    let offsets = connectivity.offsets();
    let mut stack: Vec<usize> = Vec::new();
    let mut next_label = 0u32;

    for seed in 0..values.len() {
        if values[seed] == 0 || labels[seed] != 0 {
            continue;
        }
        next_label += 1;
        let mut size = 0usize;
        labels[seed] = next_label;
        stack.push(seed);
        while let Some(idx) = stack.pop() {
            size += 1;
            let [x, y, z] = geom.coords(idx);
            for off in &offsets {
                let xx = x as i64 + off[0];
                let yy = y as i64 + off[1];
                let zz = z as i64 + off[2];
                if xx < 0 || yy < 0 || zz < 0 {
                    continue;
                }
                let (xx, yy, zz) = (xx as usize, yy as usize, zz as usize);
                if xx >= nx || yy >= ny || zz >= nz {
                    continue;
                }
                let nidx = geom.index(xx, yy, zz);
                if values[nidx] == 1 && labels[nidx] == 0 {
                    labels[nidx] = next_label;
                    stack.push(nidx);
                }
            }
        }
        sizes.push(size);
    }

    sizes[0] = values.len() - sizes[1..].iter().sum::<usize>();
    LabelMap {
        geom,
        labels,
        sizes,
        connectivity,
    }
}

/// Threshold a probability map into a mask. A voxel is positive iff its
/// probability is strictly greater than the threshold, so a voxel at
/// exactly the cut stays background.
pub fn binarize(prob: &ProbabilityMap, threshold: f64) -> Result<Mask> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Argument(format!(
            "threshold must be in [0, 1], got {threshold}"
        )));
    }
    let values = prob
        .values()
        .iter()
        .map(|&p| u8::from(f64::from(p) > threshold))
        .collect();
    Ok(Mask::new(*prob.geom(), values).expect("binarized values are 0/1"))
}
