//! Explicit sparse system matrix of the pinhole scanner.
//!
//! Rows are detector bins (detector-major, then v, then u), columns are
//! voxels. Entries are stored twice, row-compressed for the forward
//! projector and column-compressed for the back projector, so both
//! directions are plain gathers with a fixed summation order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{dot, norm, sub, ScannerGeometry, ViewSubset};
use crate::io::{sha256_hex, MatrixTriplets};
use crate::volume::{ImageVolume, ProjectionData, VoxelGrid};

/// Entries smaller than this fraction of their column maximum are dropped.
pub const DROP_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
struct Compressed {
    ptr: Vec<usize>,
    idx: Vec<u32>,
    val: Vec<f64>,
}

impl Compressed {
    fn outer(&self, i: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.ptr[i], self.ptr[i + 1]);
        (&self.idx[a..b], &self.val[a..b])
    }

    /// Transpose by counting sort; inner indices of the result come out
    /// sorted because the outer loop runs in order.
    fn transpose(&self, n_inner: usize) -> Compressed {
        let mut count = vec![0usize; n_inner + 1];
        for &i in &self.idx {
            count[i as usize + 1] += 1;
        }
        for i in 0..n_inner {
            count[i + 1] += count[i];
        }
        let ptr = count.clone();
        let mut next = count;
        let mut idx = vec![0u32; self.idx.len()];
        let mut val = vec![0.0; self.val.len()];
        for o in 0..self.ptr.len() - 1 {
            let (ii, vv) = self.outer(o);
            for (&i, &v) in ii.iter().zip(vv) {
                let slot = &mut next[i as usize];
                idx[*slot] = o as u32;
                val[*slot] = v;
                *slot += 1;
            }
        }
        Compressed { ptr, idx, val }
    }
}

/// How [`SystemMatrix::restrict_views`] treats excluded detectors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RestrictMode {
    /// Drop the rows of excluded detectors.
    #[default]
    Remove,
    /// Keep the row layout but clear the entries.
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemMatrix {
    grid: VoxelGrid,
    n_u: usize,
    n_v: usize,
    pixel_size: [f64; 2],
    detector_ids: Vec<usize>,
    rows: Compressed,
    cols: Compressed,
    geometry_hash: String,
}

/// Builds the ideal-pinhole projector: every voxel centre is projected
/// through each pinhole onto the detector plane and its solid-angle weight
/// is split bilinearly over the four nearest pixels.
pub fn build_system_matrix(geom: &ScannerGeometry, grid: &VoxelGrid) -> Result<SystemMatrix> {
    geom.validate()?;
    let (lo, hi) = grid.bounds();
    for (i, d) in geom.detectors.iter().enumerate() {
        let p = d.pinhole_position;
        if (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]) {
            return Err(Error::Geometry(format!("pinhole of detector {i} lies inside the voxel grid")));
        }
    }
    let [n_u, n_v] = geom.detectors[0].pixels;
    let per_det = n_u * n_v;
    let n_rows = per_det * geom.n_detectors();

    let columns: Vec<Vec<(u32, f64)>> = (0..grid.len())
        .into_par_iter()
        .map(|j| {
            let (ix, iy, iz) = grid.coords(j);
            let p = grid.voxel_center(ix, iy, iz);
            let mut col = Vec::with_capacity(4 * geom.n_detectors());
            for (d, det) in geom.detectors.iter().enumerate() {
                splat_voxel(det, p, d * per_det, &mut col);
            }
            let peak = col.iter().map(|e| e.1).fold(0.0, f64::max);
            col.retain(|e| e.1 > 0.0 && e.1 >= DROP_TOLERANCE * peak);
            col.sort_by_key(|e| e.0);
            col
        })
        .collect();

    let mut ptr = Vec::with_capacity(grid.len() + 1);
    ptr.push(0);
    let nnz: usize = columns.iter().map(Vec::len).sum();
    if nnz == 0 {
        return Err(Error::Degenerate("system matrix has no nonzero entries".into()));
    }
    let mut idx = Vec::with_capacity(nnz);
    let mut val = Vec::with_capacity(nnz);
    for col in &columns {
        for &(r, v) in col {
            idx.push(r);
            val.push(v);
        }
        ptr.push(idx.len());
    }
    let cols = Compressed { ptr, idx, val };
    let rows = cols.transpose(n_rows);
    let geometry_hash = sha256_hex(format!("{}\n{}", geom.to_text(), grid.canonical()).as_bytes());
    Ok(SystemMatrix {
        grid: grid.clone(),
        n_u,
        n_v,
        pixel_size: geom.detectors[0].pixel_size(),
        detector_ids: (0..geom.n_detectors()).collect(),
        rows,
        cols,
        geometry_hash,
    })
}

fn splat_voxel(det: &crate::geometry::DetectorSpec, p: [f64; 3], row_offset: usize, out: &mut Vec<(u32, f64)>) {
    let h = det.pinhole_position;
    let n = det.detector_normal;
    let ray = sub(h, p);
    let along = dot(ray, n);
    // the voxel must sit on the object side of the pinhole
    if along >= 0.0 {
        return;
    }
    let r = norm(ray);
    let s = dot(sub(det.detector_center, h), n) / along;
    let q = [h[0] + s * ray[0], h[1] + s * ray[1], h[2] + s * ray[2]];
    let (eu, ev) = det.axes();
    let local = sub(q, det.detector_center);
    let [du, dv] = det.pixel_size();
    let [nu, nv] = det.pixels;
    let pu = dot(local, eu) / du + 0.5 * nu as f64 - 0.5;
    let pv = dot(local, ev) / dv + 0.5 * nv as f64 - 0.5;
    if !(pu > -1.0 && pu < nu as f64 && pv > -1.0 && pv < nv as f64) {
        return;
    }
    let cos_theta = -along / r;
    let area = std::f64::consts::PI * 0.25 * det.aperture_diameter * det.aperture_diameter;
    let weight = area * cos_theta / (4.0 * std::f64::consts::PI * r * r);
    let (u0, v0) = (pu.floor(), pv.floor());
    let (fu, fv) = (pu - u0, pv - v0);
    for (dv_, wv) in [(0i64, 1.0 - fv), (1, fv)] {
        for (du_, wu) in [(0i64, 1.0 - fu), (1, fu)] {
            let (iu, iv) = (u0 as i64 + du_, v0 as i64 + dv_);
            let w = weight * wu * wv;
            if w > 0.0 && iu >= 0 && iv >= 0 && (iu as usize) < nu && (iv as usize) < nv {
                out.push(((row_offset + iv as usize * nu + iu as usize) as u32, w));
            }
        }
    }
}

impl SystemMatrix {
    /// Number of detector bins.
    pub fn n_rows(&self) -> usize {
        self.rows.ptr.len() - 1
    }

    /// Number of voxels.
    pub fn n_cols(&self) -> usize {
        self.cols.ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.cols.val.len()
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn detector_ids(&self) -> &[usize] {
        &self.detector_ids
    }

    pub fn pixels_per_detector(&self) -> usize {
        self.n_u * self.n_v
    }

    pub fn geometry_hash(&self) -> &str {
        &self.geometry_hash
    }

    /// Stored entries of one detector bin as `(voxel, value)` pairs.
    pub fn row(&self, k: usize) -> (&[u32], &[f64]) {
        self.rows.outer(k)
    }

    /// Stored entries of one voxel as `(bin, value)` pairs.
    pub fn column(&self, j: usize) -> (&[u32], &[f64]) {
        self.cols.outer(j)
    }

    pub fn empty_projection(&self) -> ProjectionData {
        ProjectionData::zeros(self.n_u, self.n_v, self.pixel_size, self.detector_ids.clone())
    }

    pub fn check_projection(&self, y: &ProjectionData) -> Result<()> {
        if y.n_u != self.n_u || y.n_v != self.n_v || y.detector_ids != self.detector_ids || y.len() != self.n_rows() {
            return Err(Error::shape(format!(
                "projection {}x{}x{:?} does not match matrix {}x{}x{:?}",
                y.n_u, y.n_v, y.detector_ids, self.n_u, self.n_v, self.detector_ids
            )));
        }
        Ok(())
    }

    pub fn check_volume(&self, x: &ImageVolume) -> Result<()> {
        if x.grid.dims != self.grid.dims || x.len() != self.n_cols() {
            return Err(Error::shape(format!("volume dims {:?} do not match matrix grid {:?}", x.grid.dims, self.grid.dims)));
        }
        Ok(())
    }

    /// `y(k) = sum_j S(j,k) x(j)`.
    pub fn forward_project(&self, x: &ImageVolume) -> Result<ProjectionData> {
        self.check_volume(x)?;
        if !x.is_finite() {
            return Err(Error::Precondition("forward projection of non-finite volume".into()));
        }
        let mut y = self.empty_projection();
        self.forward_into(&x.data, &mut y.data);
        Ok(y)
    }

    pub(crate) fn forward_into(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut().enumerate().for_each(|(k, yk)| {
            let (idx, val) = self.rows.outer(k);
            *yk = idx.iter().zip(val).map(|(&j, &v)| v * x[j as usize]).sum();
        });
    }

    /// `x(j) = sum_k S(j,k) y(k)`, the exact transpose of
    /// [`forward_project`](Self::forward_project).
    pub fn back_project(&self, y: &ProjectionData) -> Result<ImageVolume> {
        self.check_projection(y)?;
        let mut x = ImageVolume::zeros(&self.grid);
        self.back_into(&y.data, &mut x.data);
        Ok(x)
    }

    pub(crate) fn back_into(&self, y: &[f64], x: &mut [f64]) {
        x.par_iter_mut().enumerate().for_each(|(j, xj)| {
            let (idx, val) = self.cols.outer(j);
            *xj = idx.iter().zip(val).map(|(&k, &v)| v * y[k as usize]).sum();
        });
    }

    /// Per-voxel sum of matrix entries.
    pub fn sensitivity(&self) -> ImageVolume {
        let mut x = ImageVolume::zeros(&self.grid);
        x.data.par_iter_mut().enumerate().for_each(|(j, xj)| {
            *xj = self.cols.outer(j).1.iter().sum();
        });
        x
    }

    /// Keeps only the detectors in `subset` (geometry indices).
    pub fn restrict_views(&self, subset: &ViewSubset, mode: RestrictMode) -> Result<SystemMatrix> {
        let positions = subset
            .included()
            .iter()
            .map(|id| {
                self.detector_ids
                    .iter()
                    .position(|d| d == id)
                    .ok_or_else(|| Error::param(format!("detector {id} is not part of this matrix")))
            })
            .collect::<Result<Vec<_>>>()?;
        let per_det = self.pixels_per_detector();
        let (rows, detector_ids) = match mode {
            RestrictMode::Remove => {
                let mut ptr = vec![0];
                let mut idx = Vec::new();
                let mut val = Vec::new();
                for &pos in &positions {
                    for k in pos * per_det..(pos + 1) * per_det {
                        let (ii, vv) = self.rows.outer(k);
                        idx.extend_from_slice(ii);
                        val.extend_from_slice(vv);
                        ptr.push(idx.len());
                    }
                }
                (Compressed { ptr, idx, val }, subset.included().to_vec())
            }
            RestrictMode::Zero => {
                let mut ptr = vec![0];
                let mut idx = Vec::new();
                let mut val = Vec::new();
                for k in 0..self.n_rows() {
                    if positions.contains(&(k / per_det)) {
                        let (ii, vv) = self.rows.outer(k);
                        idx.extend_from_slice(ii);
                        val.extend_from_slice(vv);
                    }
                    ptr.push(idx.len());
                }
                (Compressed { ptr, idx, val }, self.detector_ids.clone())
            }
        };
        if rows.val.is_empty() {
            return Err(Error::Degenerate("view restriction left no entries".into()));
        }
        let cols = rows.transpose(self.n_cols());
        let tag = match mode {
            RestrictMode::Remove => "remove",
            RestrictMode::Zero => "zero",
        };
        let geometry_hash = sha256_hex(format!("{}|{tag}|{:?}", self.geometry_hash, subset.included()).as_bytes());
        Ok(SystemMatrix {
            grid: self.grid.clone(),
            n_u: self.n_u,
            n_v: self.n_v,
            pixel_size: self.pixel_size,
            detector_ids,
            rows,
            cols,
            geometry_hash,
        })
    }

    /// Row-major triplets for the SPSM file format (values rounded to f32).
    pub fn to_triplets(&self) -> MatrixTriplets {
        let mut entries = Vec::with_capacity(self.nnz());
        for k in 0..self.n_rows() {
            let (idx, val) = self.rows.outer(k);
            for (&j, &v) in idx.iter().zip(val) {
                entries.push((k as u32, j, v as f32));
            }
        }
        MatrixTriplets { rows: self.n_rows(), cols: self.n_cols(), entries }
    }

    /// Rebuilds a matrix from SPSM triplets plus the layout metadata the
    /// file format does not carry.
    pub fn from_triplets(t: &MatrixTriplets, grid: &VoxelGrid, layout: &ProjectionData, geometry_hash: String) -> Result<SystemMatrix> {
        if t.cols != grid.len() || t.rows != layout.len() {
            return Err(Error::shape(format!("triplets {}x{} vs layout {}x{}", t.rows, t.cols, layout.len(), grid.len())));
        }
        let mut sorted = t.entries.clone();
        sorted.sort_by_key(|e| (e.0, e.1));
        let mut ptr = vec![0usize; t.rows + 1];
        for e in &sorted {
            ptr[e.0 as usize + 1] += 1;
        }
        for k in 0..t.rows {
            ptr[k + 1] += ptr[k];
        }
        let rows = Compressed { ptr, idx: sorted.iter().map(|e| e.1).collect(), val: sorted.iter().map(|e| e.2 as f64).collect() };
        let cols = rows.transpose(t.cols);
        Ok(SystemMatrix {
            grid: grid.clone(),
            n_u: layout.n_u,
            n_v: layout.n_v,
            pixel_size: layout.pixel_size,
            detector_ids: layout.detector_ids.clone(),
            rows,
            cols,
            geometry_hash,
        })
    }
}
