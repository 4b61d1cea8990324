//! Dense image volumes and stacked detector projections.

use crate::error::{Error, Result};

/// Regular voxel lattice. Voxel `(ix, iy, iz)` has its centre at
/// `origin + (i + 0.5) * voxel_size` per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub voxel_size: [f64; 3],
    pub origin: [f64; 3],
}

impl VoxelGrid {
    /// Grid of the given dimensions centred on the world origin.
    pub fn centered(dims: [usize; 3], voxel_size: [f64; 3]) -> Result<Self> {
        let origin = [-0.5 * dims[0] as f64 * voxel_size[0], -0.5 * dims[1] as f64 * voxel_size[1], -0.5 * dims[2] as f64 * voxel_size[2]];
        Self::new(dims, voxel_size, origin)
    }

    pub fn new(dims: [usize; 3], voxel_size: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::param(format!("grid dims must be >= 1, got {dims:?}")));
        }
        if voxel_size.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::param(format!("voxel size must be positive, got {voxel_size:?}")));
        }
        if origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("grid origin must be finite"));
        }
        Ok(Self { dims, voxel_size, origin })
    }

    /// Desk default: 32x32x16 voxels of 4 mm.
    pub fn desk_default() -> Self {
        Self::centered([32, 32, 16], [4.0; 3]).expect("static grid is valid")
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        ix + self.dims[0] * (iy + self.dims[1] * iz)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let ix = idx % self.dims[0];
        let rest = idx / self.dims[0];
        (ix, rest % self.dims[1], rest / self.dims[1])
    }

    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        [
            self.origin[0] + (ix as f64 + 0.5) * self.voxel_size[0],
            self.origin[1] + (iy as f64 + 0.5) * self.voxel_size[1],
            self.origin[2] + (iz as f64 + 0.5) * self.voxel_size[2],
        ]
    }

    /// Axis-aligned bounding box `(min, max)` in mm.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut hi = self.origin;
        for a in 0..3 {
            hi[a] += self.dims[a] as f64 * self.voxel_size[a];
        }
        (self.origin, hi)
    }

    pub fn center(&self) -> [f64; 3] {
        let (lo, hi) = self.bounds();
        [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])]
    }

    /// Canonical text used for hashing.
    pub(crate) fn canonical(&self) -> String {
        format!(
            "dims={},{},{};voxel={:?},{:?},{:?};origin={:?},{:?},{:?}",
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.voxel_size[0],
            self.voxel_size[1],
            self.voxel_size[2],
            self.origin[0],
            self.origin[1],
            self.origin[2]
        )
    }
}

/// Dense scalar field over a [`VoxelGrid`], x fastest then y then z.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageVolume {
    pub grid: VoxelGrid,
    pub data: Vec<f64>,
}

impl ImageVolume {
    pub fn zeros(grid: &VoxelGrid) -> Self {
        Self { grid: grid.clone(), data: vec![0.0; grid.len()] }
    }

    pub fn filled(grid: &VoxelGrid, value: f64) -> Self {
        Self { grid: grid.clone(), data: vec![value; grid.len()] }
    }

    pub fn from_vec(grid: &VoxelGrid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::shape(format!("volume payload has {} values, grid needs {}", data.len(), grid.len())));
        }
        Ok(Self { grid: grid.clone(), data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.data[self.grid.index(ix, iy, iz)]
    }

    pub fn slice(&self, iz: usize) -> &[f64] {
        let n = self.grid.slice_len();
        &self.data[iz * n..(iz + 1) * n]
    }

    pub fn slice_mut(&mut self, iz: usize) -> &mut [f64] {
        let n = self.grid.slice_len();
        &mut self.data[iz * n..(iz + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { grid: self.grid.clone(), data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { grid: self.grid.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.grid.dims != other.grid.dims {
            return Err(Error::shape(format!("volume dims {:?} vs {:?}", self.grid.dims, other.grid.dims)));
        }
        Ok(())
    }
}

/// Per-detector 2D arrays stacked in detector order.
///
/// `detector_ids` names which scanner detectors are present, so a
/// view-restricted set stays traceable to the full geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionData {
    pub n_u: usize,
    pub n_v: usize,
    pub pixel_size: [f64; 2],
    pub detector_ids: Vec<usize>,
    pub data: Vec<f64>,
}

impl ProjectionData {
    pub fn zeros(n_u: usize, n_v: usize, pixel_size: [f64; 2], detector_ids: Vec<usize>) -> Self {
        let len = n_u * n_v * detector_ids.len();
        Self { n_u, n_v, pixel_size, detector_ids, data: vec![0.0; len] }
    }

    pub fn pixels_per_detector(&self) -> usize {
        self.n_u * self.n_v
    }

    pub fn n_detectors(&self) -> usize {
        self.detector_ids.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn detector(&self, pos: usize) -> &[f64] {
        let n = self.pixels_per_detector();
        &self.data[pos * n..(pos + 1) * n]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = f(*v));
        out
    }

    pub fn is_integer_valued(&self) -> bool {
        self.data.iter().all(|v| v.is_finite() && *v >= 0.0 && v.fract() == 0.0)
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.n_u == other.n_u && self.n_v == other.n_v && self.detector_ids == other.detector_ids
    }
}
