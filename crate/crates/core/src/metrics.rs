//! Image-quality metrics and sweep reports.
//!
//! NRMSE is normalised by the reference range. SSIM uses an 11x11 Gaussian
//! window (sigma 1.5), K1 = 0.01, K2 = 0.03 and the reference range as the
//! dynamic range, evaluated per axial slice over valid window positions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::volume::ImageVolume;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn range(v: &ImageVolume) -> (f64, f64) {
    (v.min(), v.max())
}

fn mse(x: &ImageVolume, r: &ImageVolume) -> Result<f64> {
    x.check_same_shape(r)?;
    Ok(x.data.iter().zip(&r.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

fn non_constant(r: &ImageVolume) -> Result<(f64, f64)> {
    let (lo, hi) = range(r);
    if !(hi > lo) {
        return Err(Error::Degenerate("reference volume is constant".into()));
    }
    Ok((lo, hi))
}

/// `10 log10(max(ref)^2 / MSE)`; `+inf` for identical volumes.
pub fn psnr(x: &ImageVolume, r: &ImageVolume) -> Result<f64> {
    non_constant(r)?;
    let m = mse(x, r)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = r.max();
    Ok(10.0 * (peak * peak / m).log10())
}

/// `sqrt(MSE) / (max(ref) - min(ref))`.
pub fn nrmse(x: &ImageVolume, r: &ImageVolume) -> Result<f64> {
    let (lo, hi) = non_constant(r)?;
    Ok(mse(x, r)?.sqrt() / (hi - lo))
}

/// Mean SSIM with the reference range as dynamic range.
pub fn ssim(x: &ImageVolume, r: &ImageVolume) -> Result<f64> {
    let (lo, hi) = non_constant(r)?;
    ssim_with_range(x, r, hi - lo)
}

fn gaussian_window() -> Vec<f64> {
    let h = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - h).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of one slice.
fn filter_valid(img: &[f64], nx: usize, ny: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ox, oy) = (nx - k + 1, ny - k + 1);
    let mut tmp = vec![0.0; ox * ny];
    for y in 0..ny {
        for x in 0..ox {
            tmp[y * ox + x] = (0..k).map(|i| g[i] * img[y * nx + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ox * oy];
    for y in 0..oy {
        for x in 0..ox {
            out[y * ox + x] = (0..k).map(|i| g[i] * tmp[(y + i) * ox + x]).sum();
        }
    }
    out
}

/// SSIM with an explicit dynamic range, so it is symmetric in its inputs.
pub fn ssim_with_range(x: &ImageVolume, r: &ImageVolume, dynamic_range: f64) -> Result<f64> {
    x.check_same_shape(r)?;
    let [nx, ny, nz] = x.dims();
    if nx < SSIM_WINDOW || ny < SSIM_WINDOW {
        return Err(Error::shape(format!("SSIM needs slices of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {nx}x{ny}")));
    }
    if !(dynamic_range > 0.0) {
        return Err(Error::param("SSIM dynamic range must be positive"));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * dynamic_range).powi(2);
    let c2 = (SSIM_K2 * dynamic_range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for z in 0..nz {
        let (a, b) = (x.slice(z), r.slice(z));
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let mu_a = filter_valid(a, nx, ny, &g);
        let mu_b = filter_valid(b, nx, ny, &g);
        let aa = filter_valid(&prod(a, a), nx, ny, &g);
        let bb = filter_valid(&prod(b, b), nx, ny, &g);
        let ab = filter_valid(&prod(a, b), nx, ny, &g);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub label: String,
    pub psnr: f64,
    pub nrmse: f64,
    pub ssim: f64,
    /// Number of volume pairs averaged.
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub metadata: BTreeMap<String, String>,
}

/// Per-condition mean metrics, rows in order of first appearance.
pub fn evaluate_sweep(conditions: &[String], volumes: &[ImageVolume], refs: &[ImageVolume]) -> Result<MetricReport> {
    if conditions.len() != volumes.len() || volumes.len() != refs.len() {
        return Err(Error::shape(format!("{} conditions, {} volumes and {} references", conditions.len(), volumes.len(), refs.len())));
    }
    let mut rows: Vec<MetricRow> = Vec::new();
    for ((c, v), r) in conditions.iter().zip(volumes).zip(refs) {
        let (p, n, s) = (psnr(v, r)?, nrmse(v, r)?, ssim(v, r)?);
        match rows.iter_mut().find(|row| &row.label == c) {
            Some(row) => {
                row.psnr += p;
                row.nrmse += n;
                row.ssim += s;
                row.n += 1;
            }
            None => rows.push(MetricRow { label: c.clone(), psnr: p, nrmse: n, ssim: s, n: 1 }),
        }
    }
    for row in &mut rows {
        let k = row.n as f64;
        row.psnr /= k;
        row.nrmse /= k;
        row.ssim /= k;
    }
    Ok(MetricReport { rows, metadata: default_metadata() })
}

fn default_metadata() -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("nrmse_normalizer".into(), "reference range".into());
    m.insert(
        "ssim".into(),
        format!("gaussian {SSIM_WINDOW}x{SSIM_WINDOW} sigma {SSIM_SIGMA}, K1 {SSIM_K1}, K2 {SSIM_K2}, slicewise valid"),
    );
    m
}

fn fmt_psnr(p: f64) -> String {
    if p.is_infinite() {
        "inf".into()
    } else {
        format!("{p:.3}")
    }
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("condition,psnr_db,nrmse,ssim,n\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.5},{:.5},{}", r.label, fmt_psnr(r.psnr), r.nrmse, r.ssim, r.n);
        }
        s
    }

    /// Aligned plain-text table, `PSNR / NRMSE / SSIM` per row.
    pub fn to_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max("condition".len());
        let mut s = format!("{:<w$}  {:>9}  {:>8}  {:>7}\n", "condition", "PSNR", "NRMSE", "SSIM");
        for r in &self.rows {
            let _ = writeln!(s, "{:<w$}  {:>9}  {:>8.4}  {:>7.4}", r.label, fmt_psnr(r.psnr), r.nrmse, r.ssim);
        }
        s
    }

    /// `key=value` metadata lines.
    pub fn metadata_text(&self) -> String {
        self.metadata.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
