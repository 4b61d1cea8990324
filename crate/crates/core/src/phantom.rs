//! Synthetic cardiac phantoms and Poisson projection data.
//!
//! The phantom is an axis-aligned ellipsoidal myocardial shell inside an
//! elliptic-cylinder body, with optional perfusion defects and a liver-like
//! blob. The anatomy surrogate is a smoothed label map of the same
//! structures that ignores defects, the way a CT would.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::ViewSubset;
use crate::io::parse_key_values;
use crate::rng::{stream, Purpose};
use crate::sysmat::SystemMatrix;
use crate::volume::{ImageVolume, ProjectionData, VoxelGrid};

/// Anatomy label intensities.
const ANATOMY_BODY: f64 = 0.3;
const ANATOMY_CAVITY: f64 = 0.45;
const ANATOMY_BLOB: f64 = 0.55;
const ANATOMY_MYOCARDIUM: f64 = 0.8;
const ANATOMY_SMOOTH_SIGMA: f64 = 0.6;

#[derive(Clone, Debug, PartialEq)]
pub struct Shell {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub thickness: f64,
    pub activity: f64,
}

/// Perfusion defect: an azimuthal wedge of the shell between two z planes
/// (relative to the shell centre). `severity = 1` removes all myocardial
/// uptake.
#[derive(Clone, Debug, PartialEq)]
pub struct Defect {
    pub azimuth_deg: f64,
    pub width_deg: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub severity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub activity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub myocardium: Shell,
    pub defects: Vec<Defect>,
    pub background: f64,
    /// Semi-axes (x, y) of the elliptic-cylinder body in mm.
    pub body_semi_axes: [f64; 2],
    pub liver_blob: Option<Blob>,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            myocardium: Shell { center: [4.0, -2.0, 0.0], semi_axes: [26.0, 24.0, 22.0], thickness: 8.0, activity: 1.0 },
            defects: Vec::new(),
            background: 0.1,
            body_semi_axes: [52.0, 44.0],
            liver_blob: Some(Blob { center: [-30.0, -22.0, -12.0], semi_axes: [18.0, 14.0, 12.0], activity: 0.45 }),
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let m = &self.myocardium;
        let min_axis = m.semi_axes.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min_axis > 0.0) {
            return Err(Error::param("shell semi-axes must be positive"));
        }
        if !(m.thickness > 0.0 && m.thickness < min_axis) {
            return Err(Error::param(format!("wall thickness {} must be in (0, {min_axis})", m.thickness)));
        }
        if !(m.activity >= 0.0 && self.background >= 0.0) {
            return Err(Error::param("activity levels must be nonnegative"));
        }
        if self.body_semi_axes.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::param("body semi-axes must be positive"));
        }
        if let Some(b) = &self.liver_blob {
            if !(b.activity >= 0.0) || b.semi_axes.iter().any(|&a| !(a > 0.0)) {
                return Err(Error::param("liver blob needs positive axes and nonnegative activity"));
            }
        }
        for d in &self.defects {
            if !(0.0..=1.0).contains(&d.severity) {
                return Err(Error::param(format!("defect severity {} outside [0,1]", d.severity)));
            }
            if !(d.width_deg > 0.0 && d.width_deg <= 360.0) {
                return Err(Error::param(format!("defect width {} deg outside (0,360]", d.width_deg)));
            }
            let az = m.semi_axes[2];
            if !(d.z_min < d.z_max) || d.z_min < -az || d.z_max > az {
                return Err(Error::param(format!("defect z-range [{}, {}] is outside the shell extent [-{az}, {az}]", d.z_min, d.z_max)));
            }
        }
        Ok(())
    }

    /// Randomised spec for data sets. Same seed, same spec.
    pub fn random(seed: u64) -> Self {
        let mut rng = stream(seed, Purpose::Phantom, 0);
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        let center = [u(-6.0, 6.0), u(-6.0, 6.0), u(-3.0, 3.0)];
        let semi_axes = [u(20.0, 30.0), u(20.0, 30.0), u(17.0, 24.0)];
        let thickness = u(6.5, 10.0);
        let activity = u(0.8, 1.2);
        let background = u(0.07, 0.15);
        let n_defects = (u(0.0, 2.999)) as usize;
        let defects = (0..n_defects)
            .map(|_| {
                let z0 = u(-semi_axes[2], 0.5 * semi_axes[2]);
                let len = u(8.0, 20.0);
                Defect {
                    azimuth_deg: u(-180.0, 180.0),
                    width_deg: u(40.0, 120.0),
                    z_min: z0,
                    z_max: (z0 + len).min(semi_axes[2]),
                    severity: u(0.4, 1.0),
                }
            })
            .collect();
        let has_blob = u(0.0, 1.0) < 0.7;
        let liver_blob = has_blob.then(|| Blob {
            center: [u(-36.0, -24.0), u(-28.0, -16.0), u(-16.0, -6.0)],
            semi_axes: [u(12.0, 20.0), u(10.0, 16.0), u(8.0, 14.0)],
            activity: u(0.3, 0.6),
        });
        Self {
            myocardium: Shell { center, semi_axes, thickness, activity },
            defects,
            background,
            body_semi_axes: [u(48.0, 56.0), u(40.0, 46.0)],
            liver_blob,
            seed,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let v3 = |v: &[f64; 3]| format!("{:?},{:?},{:?}", v[0], v[1], v[2]);
        let m = &self.myocardium;
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "background={:?}", self.background);
        let _ = writeln!(s, "body.semi_axes={:?},{:?}", self.body_semi_axes[0], self.body_semi_axes[1]);
        let _ = writeln!(s, "myocardium.center={}", v3(&m.center));
        let _ = writeln!(s, "myocardium.semi_axes={}", v3(&m.semi_axes));
        let _ = writeln!(s, "myocardium.thickness={:?}", m.thickness);
        let _ = writeln!(s, "myocardium.activity={:?}", m.activity);
        if let Some(b) = &self.liver_blob {
            let _ = writeln!(s, "blob.center={}", v3(&b.center));
            let _ = writeln!(s, "blob.semi_axes={}", v3(&b.semi_axes));
            let _ = writeln!(s, "blob.activity={:?}", b.activity);
        }
        let _ = writeln!(s, "defects={}", self.defects.len());
        for (i, d) in self.defects.iter().enumerate() {
            let _ = writeln!(s, "defect.{i}={:?},{:?},{:?},{:?},{:?}", d.azimuth_deg, d.width_deg, d.z_min, d.z_max, d.severity);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = parse_key_values(text)?;
        let mut take = |k: &str| kv.remove(k).ok_or_else(|| Error::Format(format!("phantom spec missing {k}")));
        let nums = |s: String| -> Result<Vec<f64>> {
            s.split(',').map(|x| x.trim().parse::<f64>().map_err(|_| Error::Format(format!("bad number {x:?}")))).collect()
        };
        let arr3 = |s: String| -> Result<[f64; 3]> { nums(s)?.try_into().map_err(|_| Error::Format("expected 3 components".into())) };
        let num = |s: String| -> Result<f64> { s.trim().parse().map_err(|_| Error::Format(format!("bad number {s:?}"))) };
        let seed = take("seed")?.parse().map_err(|_| Error::Format("bad seed".into()))?;
        let background = num(take("background")?)?;
        let body: Vec<f64> = nums(take("body.semi_axes")?)?;
        if body.len() != 2 {
            return Err(Error::Format("body.semi_axes needs 2 components".into()));
        }
        let myocardium = Shell {
            center: arr3(take("myocardium.center")?)?,
            semi_axes: arr3(take("myocardium.semi_axes")?)?,
            thickness: num(take("myocardium.thickness")?)?,
            activity: num(take("myocardium.activity")?)?,
        };
        let n_defects: usize = take("defects")?.parse().map_err(|_| Error::Format("bad defect count".into()))?;
        let mut defects = Vec::with_capacity(n_defects);
        for i in 0..n_defects {
            let v = nums(take(&format!("defect.{i}"))?)?;
            if v.len() != 5 {
                return Err(Error::Format(format!("defect.{i} needs 5 components")));
            }
            defects.push(Defect { azimuth_deg: v[0], width_deg: v[1], z_min: v[2], z_max: v[3], severity: v[4] });
        }
        let liver_blob = match kv.contains_key("blob.center") {
            true => {
                let mut take = |k: &str| kv.remove(k).ok_or_else(|| Error::Format(format!("phantom spec missing {k}")));
                Some(Blob {
                    center: arr3(take("blob.center")?)?,
                    semi_axes: arr3(take("blob.semi_axes")?)?,
                    activity: num(take("blob.activity")?)?,
                })
            }
            false => None,
        };
        if let Some(k) = kv.keys().next() {
            return Err(Error::Format(format!("unknown phantom key {k:?}")));
        }
        let spec = Self { myocardium, defects, background, body_semi_axes: [body[0], body[1]], liver_blob, seed };
        spec.validate()?;
        Ok(spec)
    }
}

/// Dose fraction in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct CountLevel(f64);

impl CountLevel {
    pub fn new(c: f64) -> Result<Self> {
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::param(format!("count level must be in (0,1], got {c}")));
        }
        Ok(Self(c))
    }

    /// Effective level of a few-view acquisition: included / total detectors.
    pub fn for_views(included: usize, total: usize) -> Result<Self> {
        Self::new(included as f64 / total as f64)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Region labels at one voxel centre.
struct Labels {
    body: bool,
    shell: bool,
    cavity: bool,
    blob: bool,
    defect_severity: f64,
}

fn label(spec: &PhantomSpec, p: [f64; 3]) -> Labels {
    let m = &spec.myocardium;
    let body = (p[0] / spec.body_semi_axes[0]).powi(2) + (p[1] / spec.body_semi_axes[1]).powi(2) <= 1.0;
    let d = [p[0] - m.center[0], p[1] - m.center[1], p[2] - m.center[2]];
    let rho = |axes: [f64; 3]| (0..3).map(|a| (d[a] / axes[a]).powi(2)).sum::<f64>();
    let inner_axes = m.semi_axes.map(|a| a - m.thickness);
    let in_outer = rho(m.semi_axes) <= 1.0;
    let in_inner = rho(inner_axes) < 1.0;
    let shell = body && in_outer && !in_inner;
    let cavity = body && in_inner;
    let blob = body
        && !in_outer
        && spec.liver_blob.as_ref().is_some_and(|b| (0..3).map(|a| ((p[a] - b.center[a]) / b.semi_axes[a]).powi(2)).sum::<f64>() <= 1.0);
    let mut defect_severity: f64 = 0.0;
    if shell {
        let az = d[1].atan2(d[0]).to_degrees();
        for def in &spec.defects {
            let mut delta = (az - def.azimuth_deg).rem_euclid(360.0);
            if delta > 180.0 {
                delta -= 360.0;
            }
            if delta.abs() <= 0.5 * def.width_deg && d[2] >= def.z_min && d[2] <= def.z_max {
                defect_severity = defect_severity.max(def.severity);
            }
        }
    }
    Labels { body, shell, cavity, blob, defect_severity }
}

/// Activity and anatomy volumes of `spec` sampled at voxel centres.
pub fn make_phantom(spec: &PhantomSpec, grid: &VoxelGrid) -> Result<(ImageVolume, ImageVolume)> {
    spec.validate()?;
    let mut activity = ImageVolume::zeros(grid);
    let mut labels = ImageVolume::zeros(grid);
    for idx in 0..grid.len() {
        let (ix, iy, iz) = grid.coords(idx);
        let l = label(spec, grid.voxel_center(ix, iy, iz));
        if !l.body {
            continue;
        }
        let mut a = spec.background;
        let mut anat = ANATOMY_BODY;
        if l.shell {
            a += spec.myocardium.activity * (1.0 - l.defect_severity);
            anat = ANATOMY_MYOCARDIUM;
        } else if l.cavity {
            anat = ANATOMY_CAVITY;
        } else if l.blob {
            a += spec.liver_blob.as_ref().map_or(0.0, |b| b.activity);
            anat = ANATOMY_BLOB;
        }
        activity.data[idx] = a;
        labels.data[idx] = anat;
    }
    let anatomy = gaussian_smooth(&labels, ANATOMY_SMOOTH_SIGMA);
    Ok((activity, anatomy))
}

/// Separable Gaussian blur (sigma in voxels) with edge clamping.
fn gaussian_smooth(vol: &ImageVolume, sigma: f64) -> ImageVolume {
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / ksum).collect();
    let dims = vol.grid.dims;
    let mut cur = vol.clone();
    for axis in 0..3 {
        let mut next = ImageVolume::zeros(&vol.grid);
        for idx in 0..vol.len() {
            let c = vol.grid.coords(idx);
            let mut pos = [c.0, c.1, c.2];
            let base = pos[axis] as i64;
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let q = (base + t as i64 - radius).clamp(0, dims[axis] as i64 - 1) as usize;
                pos[axis] = q;
                acc += w * cur.data[vol.grid.index(pos[0], pos[1], pos[2])];
            }
            next.data[idx] = acc;
        }
        cur = next;
    }
    cur
}

/// Noise-free expected counts, scaled so they sum to `total_counts`.
pub fn expected_counts(s: &SystemMatrix, activity: &ImageVolume, total_counts: f64) -> Result<ProjectionData> {
    if activity.data.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Precondition("activity must be nonnegative and finite".into()));
    }
    if !(total_counts > 0.0) {
        return Err(Error::param("total counts must be positive"));
    }
    let mut lambda = s.forward_project(activity)?;
    let sum = lambda.sum();
    if !(sum > 0.0) {
        return Err(Error::Degenerate("activity projects to all-zero expectation".into()));
    }
    let k = total_counts / sum;
    lambda.data.iter_mut().for_each(|v| *v *= k);
    Ok(lambda)
}

/// Factor mapping activity units to expected-count units for
/// [`expected_counts`].
pub fn count_scale(s: &SystemMatrix, activity: &ImageVolume, total_counts: f64) -> Result<f64> {
    let sum = s.forward_project(activity)?.sum();
    if !(sum > 0.0) {
        return Err(Error::Degenerate("activity projects to all-zero expectation".into()));
    }
    Ok(total_counts / sum)
}

/// Independent Poisson draws around [`expected_counts`].
pub fn simulate_counts(s: &SystemMatrix, activity: &ImageVolume, total_counts: u64, seed: u64) -> Result<ProjectionData> {
    if total_counts == 0 {
        return Err(Error::param("total counts must be >= 1"));
    }
    let lambda = expected_counts(s, activity, total_counts as f64)?;
    Ok(poisson_draw(&lambda, seed))
}

/// Poisson draw per bin with one random stream per bin index.
pub fn poisson_draw(lambda: &ProjectionData, seed: u64) -> ProjectionData {
    let mut y = lambda.clone();
    y.data.par_iter_mut().enumerate().for_each(|(k, v)| {
        *v = if *v > 0.0 {
            let mut rng = stream(seed, Purpose::Counts, k as u64);
            Poisson::new(*v).expect("positive rate").sample(&mut rng)
        } else {
            0.0
        };
    });
    y
}

/// Binomial thinning: every count survives independently with
/// probability `level`.
pub fn thin_counts(y: &ProjectionData, level: CountLevel, seed: u64) -> Result<ProjectionData> {
    if !y.is_integer_valued() {
        return Err(Error::Precondition("thinning needs nonnegative integer counts".into()));
    }
    if level.value() == 1.0 {
        return Ok(y.clone());
    }
    let mut out = y.clone();
    out.data.par_iter_mut().enumerate().for_each(|(k, v)| {
        if *v > 0.0 {
            let mut rng = stream(seed, Purpose::Thinning, k as u64);
            *v = Binomial::new(*v as u64, level.value()).expect("valid binomial").sample(&mut rng) as f64;
        }
    });
    Ok(out)
}

/// Drops detectors outside `subset`, in the same order as
/// [`SystemMatrix::restrict_views`].
pub fn mask_views(y: &ProjectionData, subset: &ViewSubset) -> Result<ProjectionData> {
    let per = y.pixels_per_detector();
    let mut out = ProjectionData::zeros(y.n_u, y.n_v, y.pixel_size, subset.included().to_vec());
    for (dst, id) in subset.included().iter().enumerate() {
        let src = y
            .detector_ids
            .iter()
            .position(|d| d == id)
            .ok_or_else(|| Error::shape(format!("detector {id} not present in projection data")))?;
        out.data[dst * per..(dst + 1) * per].copy_from_slice(y.detector(src));
    }
    Ok(out)
}

/// Mean myocardial activity per azimuthal bin for slice `iz` (bins with no
/// shell voxels are skipped). Used to check rotational uniformity.
pub fn shell_angular_profile(spec: &PhantomSpec, activity: &ImageVolume, iz: usize, n_bins: usize) -> BTreeMap<usize, f64> {
    let grid = &activity.grid;
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for iy in 0..grid.dims[1] {
        for ix in 0..grid.dims[0] {
            let p = grid.voxel_center(ix, iy, iz);
            if !label(spec, p).shell {
                continue;
            }
            let c = spec.myocardium.center;
            let az = (p[1] - c[1]).atan2(p[0] - c[0]);
            let bin = (((az + std::f64::consts::PI) / std::f64::consts::TAU) * n_bins as f64) as usize % n_bins;
            let e = acc.entry(bin).or_insert((0.0, 0));
            e.0 += activity.get(ix, iy, iz);
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(b, (s, n))| (b, s / n as f64)).collect()
}
