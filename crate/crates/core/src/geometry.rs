//! Stationary multi-pinhole scanner description.
//!
//! The default scanner has 19 pinhole detector modules in three rows
//! (5 top, 9 centre, 5 bottom) spread over a 180 degree L-shaped arc and
//! focused on the grid centre. Detector order is stable: top row, centre
//! row, bottom row, each by increasing azimuth, so detector 9 is the
//! middle of the centre row.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::sha256_hex;

pub const N_TOP: usize = 5;
pub const N_CENTER: usize = 9;
pub const N_BOTTOM: usize = 5;
pub const N_DETECTORS: usize = N_TOP + N_CENTER + N_BOTTOM;

/// Base (scale = 1) dimensions, in mm.
const PINHOLE_RADIUS: f64 = 110.0;
const FOCAL_LENGTH: f64 = 80.0;
const DETECTOR_WIDTH: f64 = 64.0;
const APERTURE_DIAMETER: f64 = 5.0;
const ROW_ELEVATION_DEG: f64 = 30.0;
const ARC_START_DEG: f64 = -45.0;
const ARC_SPAN_DEG: f64 = 180.0;
pub const DEFAULT_PIXELS: usize = 16;

/// Diameter of the focused field of view, in voxels of the desk grid.
pub const FOV_DIAMETER_VOXELS: f64 = 19.0;
const DESK_VOXEL_MM: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Row {
    Top,
    Center,
    Bottom,
}

impl fmt::Display for Row {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Row::Top => "top",
            Row::Center => "center",
            Row::Bottom => "bottom",
        })
    }
}

impl FromStr for Row {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(Row::Top),
            "center" => Ok(Row::Center),
            "bottom" => Ok(Row::Bottom),
            other => Err(Error::Format(format!("unknown detector row {other:?}"))),
        }
    }
}

/// One pinhole/detector module. Positions in mm, world frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorSpec {
    pub pinhole_position: [f64; 3],
    pub detector_center: [f64; 3],
    /// Unit normal of the detector face, pointing toward the object.
    pub detector_normal: [f64; 3],
    /// Width and height in mm.
    pub detector_size: [f64; 2],
    pub pixels: [usize; 2],
    /// Nominal aperture diameter used for the solid-angle weight.
    pub aperture_diameter: f64,
}

impl DetectorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.pixels[0] == 0 || self.pixels[1] == 0 {
            return Err(Error::Geometry(format!("detector needs >= 1x1 pixels, got {:?}", self.pixels)));
        }
        let n = norm(self.detector_normal);
        if (n - 1.0).abs() > 1e-12 {
            return Err(Error::Geometry(format!("detector normal has norm {n}")));
        }
        if self.detector_size.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Geometry("detector size must be positive".into()));
        }
        if !(self.aperture_diameter > 0.0) {
            return Err(Error::Geometry("aperture diameter must be positive".into()));
        }
        let offset = dot(sub(self.pinhole_position, self.detector_center), self.detector_normal);
        if offset.abs() < 1e-9 {
            return Err(Error::Geometry("pinhole lies in the detector plane".into()));
        }
        Ok(())
    }

    /// Orthonormal in-plane axes `(u, v)` of the detector face.
    pub fn axes(&self) -> ([f64; 3], [f64; 3]) {
        let n = self.detector_normal;
        let up = if n[2].abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
        let u = normalize(cross(up, n));
        let v = cross(n, u);
        (u, v)
    }

    pub fn pixel_size(&self) -> [f64; 2] {
        [self.detector_size[0] / self.pixels[0] as f64, self.detector_size[1] / self.pixels[1] as f64]
    }

    pub fn n_pixels(&self) -> usize {
        self.pixels[0] * self.pixels[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScannerGeometry {
    pub detectors: Vec<DetectorSpec>,
    pub row_assignment: Vec<Row>,
}

/// Builds the desk-scale 19-detector scanner. All lengths scale linearly
/// with `scale` about the world origin.
pub fn build_default_geometry(scale: f64) -> Result<ScannerGeometry> {
    build_geometry(scale, DEFAULT_PIXELS)
}

/// Same layout as [`build_default_geometry`] with a custom pixel count per
/// detector side.
pub fn build_geometry(scale: f64, pixels: usize) -> Result<ScannerGeometry> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::param(format!("geometry scale must be positive, got {scale}")));
    }
    if pixels == 0 {
        return Err(Error::param("detector pixel count must be >= 1"));
    }
    let rows = [(Row::Top, N_TOP, ROW_ELEVATION_DEG), (Row::Center, N_CENTER, 0.0), (Row::Bottom, N_BOTTOM, -ROW_ELEVATION_DEG)];
    let mut detectors = Vec::with_capacity(N_DETECTORS);
    let mut row_assignment = Vec::with_capacity(N_DETECTORS);
    for (row, count, elevation) in rows {
        let el = elevation.to_radians();
        for k in 0..count {
            let az = (ARC_START_DEG + ARC_SPAN_DEG * k as f64 / (count - 1) as f64).to_radians();
            let dir = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            detectors.push(DetectorSpec {
                pinhole_position: mul(dir, scale * PINHOLE_RADIUS),
                detector_center: mul(dir, scale * (PINHOLE_RADIUS + FOCAL_LENGTH)),
                detector_normal: mul(dir, -1.0),
                detector_size: [scale * DETECTOR_WIDTH; 2],
                pixels: [pixels; 2],
                aperture_diameter: scale * APERTURE_DIAMETER,
            });
            row_assignment.push(row);
        }
    }
    let geom = ScannerGeometry { detectors, row_assignment };
    geom.validate()?;
    Ok(geom)
}

/// Radius in mm of the sphere every default detector is focused on.
pub fn fov_radius(scale: f64) -> f64 {
    0.5 * FOV_DIAMETER_VOXELS * DESK_VOXEL_MM * scale
}

impl ScannerGeometry {
    pub fn n_detectors(&self) -> usize {
        self.detectors.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.detectors.is_empty() {
            return Err(Error::Geometry("scanner has no detectors".into()));
        }
        if self.detectors.len() != self.row_assignment.len() {
            return Err(Error::Geometry("row assignment length differs from detector count".into()));
        }
        let px = self.detectors[0].pixels;
        for d in &self.detectors {
            d.validate()?;
            if d.pixels != px {
                return Err(Error::Geometry("all detectors must share one pixel layout".into()));
            }
        }
        Ok(())
    }

    pub fn row_counts(&self) -> (usize, usize, usize) {
        let count = |r: Row| self.row_assignment.iter().filter(|&&x| x == r).count();
        (count(Row::Top), count(Row::Center), count(Row::Bottom))
    }

    /// Indices of centre-row detectors in azimuth order.
    pub fn center_row(&self) -> Vec<usize> {
        (0..self.n_detectors()).filter(|&i| self.row_assignment[i] == Row::Center).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, (d, row)) in self.detectors.iter().zip(&self.row_assignment).enumerate() {
            if i > 0 {
                s.push('\n');
            }
            let _ = writeln!(s, "detector={i}");
            let _ = writeln!(s, "row={row}");
            let _ = writeln!(s, "pinhole_position={}", fmt_vec(&d.pinhole_position));
            let _ = writeln!(s, "detector_center={}", fmt_vec(&d.detector_center));
            let _ = writeln!(s, "detector_normal={}", fmt_vec(&d.detector_normal));
            let _ = writeln!(s, "detector_size={}", fmt_vec(&d.detector_size));
            let _ = writeln!(s, "pixels={},{}", d.pixels[0], d.pixels[1]);
            let _ = writeln!(s, "aperture_diameter={:?}", d.aperture_diameter);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut detectors = Vec::new();
        let mut rows = Vec::new();
        for block in text.split("\n\n").map(str::trim).filter(|b| !b.is_empty()) {
            let kv = crate::io::parse_key_values(block)?;
            let get = |k: &str| kv.get(k).ok_or_else(|| Error::Format(format!("geometry block missing {k}")));
            let idx: usize = parse_num(get("detector")?)?;
            if idx != detectors.len() {
                return Err(Error::Format(format!("detector blocks out of order at {idx}")));
            }
            rows.push(get("row")?.parse()?);
            let px: Vec<usize> = parse_list(get("pixels")?)?;
            if px.len() != 2 {
                return Err(Error::Format("pixels needs two entries".into()));
            }
            detectors.push(DetectorSpec {
                pinhole_position: parse_arr(get("pinhole_position")?)?,
                detector_center: parse_arr(get("detector_center")?)?,
                detector_normal: parse_arr(get("detector_normal")?)?,
                detector_size: parse_arr(get("detector_size")?)?,
                pixels: [px[0], px[1]],
                aperture_diameter: parse_num(get("aperture_diameter")?)?,
            });
        }
        let geom = ScannerGeometry { detectors, row_assignment: rows };
        geom.validate()?;
        Ok(geom)
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

/// A nonempty set of included detector indices, kept sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewSubset {
    included: Vec<usize>,
}

impl ViewSubset {
    pub fn new(mut included: Vec<usize>, n_detectors: usize) -> Result<Self> {
        included.sort_unstable();
        included.dedup();
        if included.is_empty() {
            return Err(Error::param("view subset must be nonempty"));
        }
        if let Some(&bad) = included.iter().find(|&&i| i >= n_detectors) {
            return Err(Error::param(format!("detector {bad} out of range 0..{n_detectors}")));
        }
        Ok(Self { included })
    }

    pub fn all(n_detectors: usize) -> Self {
        Self { included: (0..n_detectors).collect() }
    }

    /// Few-view preset: `n_views` centre-row detectors chosen symmetrically
    /// outward from the middle. `n_views` must be odd and at most the row size.
    pub fn preset(geom: &ScannerGeometry, n_views: usize) -> Result<Self> {
        let center = geom.center_row();
        if n_views == 0 || n_views.is_multiple_of(2) || n_views > center.len() {
            return Err(Error::param(format!("view preset must be odd and <= {}, got {n_views}", center.len())));
        }
        let mid = center.len() / 2;
        let half = n_views / 2;
        Self::new(center[mid - half..=mid + half].to_vec(), geom.n_detectors())
    }

    pub fn included(&self) -> &[usize] {
        &self.included
    }

    pub fn len(&self) -> usize {
        self.included.len()
    }

    pub fn is_empty(&self) -> bool {
        self.included.is_empty()
    }

    pub fn contains(&self, det: usize) -> bool {
        self.included.binary_search(&det).is_ok()
    }
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn parse_num<T: FromStr>(s: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Format(format!("cannot parse number {s:?}")))
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',').map(parse_num).collect()
}

fn parse_arr<const N: usize>(s: &str) -> Result<[f64; N]> {
    let v: Vec<f64> = parse_list(s)?;
    v.try_into().map_err(|_| Error::Format(format!("expected {N} components in {s:?}")))
}

#[inline]
pub(crate) fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn mul(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub(crate) fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: [f64; 3]) -> [f64; 3] {
    mul(a, 1.0 / norm(a))
}

pub(crate) fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}
