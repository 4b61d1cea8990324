//! File formats: little-endian binary volumes, projections and system
//! matrices, plain-text key=value documents and 8-bit PGM montages.
//!
//! Binary layouts:
//!
//! ```text
//! SPVL  magic[4] u32 nx u32 ny u32 nz  f32 vx f32 vy f32 vz  f32[nx*ny*nz]
//! SPPJ  magic[4] u32 n_u u32 n_v u32 n_det  f32 du f32 dv f32 1.0
//!       u32[n_det] detector ids  f32[n_u*n_v*n_det]
//! SPSM  magic[4] u32 rows u32 cols u64 nnz  (u32 row, u32 col, f32 value)[nnz]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::volume::{ImageVolume, ProjectionData, VoxelGrid};

pub const VOLUME_MAGIC: &[u8; 4] = b"SPVL";
pub const PROJECTION_MAGIC: &[u8; 4] = b"SPPJ";
pub const MATRIX_MAGIC: &[u8; 4] = b"SPSM";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped;
/// duplicate keys are an error.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Format(format!("line {}: expected key=value, got {line:?}", lineno + 1)))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Format(format!("line {}: duplicate key {k:?}", lineno + 1)));
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let m = self.take(4)?;
        if m != expect {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(expect)
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

pub fn encode_volume(vol: &ImageVolume) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(28 + 4 * vol.len());
    out.extend_from_slice(VOLUME_MAGIC);
    for &d in &vol.grid.dims {
        put_u32(&mut out, d)?;
    }
    for &v in &vol.grid.voxel_size {
        put_f32(&mut out, v);
    }
    vol.data.iter().for_each(|&v| put_f32(&mut out, v));
    Ok(out)
}

/// Decodes an SPVL payload. The file carries no origin, so the grid is
/// centred on the world origin.
pub fn decode_volume(bytes: &[u8]) -> Result<ImageVolume> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(VOLUME_MAGIC)?;
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let vs = [r.f32()? as f64, r.f32()? as f64, r.f32()? as f64];
    let grid = VoxelGrid::centered(dims, vs).map_err(|e| Error::Format(e.to_string()))?;
    let data = (0..grid.len()).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    ImageVolume::from_vec(&grid, data)
}

pub fn encode_projection(p: &ProjectionData) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(28 + 4 * (p.n_detectors() + p.len()));
    out.extend_from_slice(PROJECTION_MAGIC);
    put_u32(&mut out, p.n_u)?;
    put_u32(&mut out, p.n_v)?;
    put_u32(&mut out, p.n_detectors())?;
    put_f32(&mut out, p.pixel_size[0]);
    put_f32(&mut out, p.pixel_size[1]);
    put_f32(&mut out, 1.0);
    for &id in &p.detector_ids {
        put_u32(&mut out, id)?;
    }
    p.data.iter().for_each(|&v| put_f32(&mut out, v));
    Ok(out)
}

pub fn decode_projection(bytes: &[u8]) -> Result<ProjectionData> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(PROJECTION_MAGIC)?;
    let (n_u, n_v, n_det) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let pixel_size = [r.f32()? as f64, r.f32()? as f64];
    let _ = r.f32()?;
    let detector_ids = (0..n_det).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let data = (0..n_u * n_v * n_det).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(ProjectionData { n_u, n_v, pixel_size, detector_ids, data })
}

/// Raw SPSM triplets, row-major as stored.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixTriplets {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(u32, u32, f32)>,
}

pub fn encode_matrix(m: &MatrixTriplets) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + 12 * m.entries.len());
    out.extend_from_slice(MATRIX_MAGIC);
    put_u32(&mut out, m.rows)?;
    put_u32(&mut out, m.cols)?;
    out.extend_from_slice(&(m.entries.len() as u64).to_le_bytes());
    for &(r, c, v) in &m.entries {
        out.extend_from_slice(&r.to_le_bytes());
        out.extend_from_slice(&c.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8]) -> Result<MatrixTriplets> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.magic(MATRIX_MAGIC)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let nnz = usize::try_from(r.u64()?).map_err(|_| Error::Format("nnz overflow".into()))?;
    if nnz.checked_mul(12).is_none_or(|n| n > bytes.len()) {
        return Err(Error::Format(format!("nnz {nnz} exceeds file size")));
    }
    let mut entries = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        let (row, col, v) = (r.u32()?, r.u32()?, r.f32()?);
        if row as usize >= rows || col as usize >= cols {
            return Err(Error::Format(format!("entry ({row},{col}) outside {rows}x{cols}")));
        }
        entries.push((row, col, v));
    }
    r.finish()?;
    Ok(MatrixTriplets { rows, cols, entries })
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn write_volume(path: &Path, vol: &ImageVolume) -> Result<()> {
    write_bytes(path, &encode_volume(vol)?)
}

pub fn read_volume(path: &Path) -> Result<ImageVolume> {
    decode_volume(&read_bytes(path)?)
}

pub fn write_projection(path: &Path, p: &ProjectionData) -> Result<()> {
    write_bytes(path, &encode_projection(p)?)
}

pub fn read_projection(path: &Path) -> Result<ProjectionData> {
    decode_projection(&read_bytes(path)?)
}

/// Binary PGM (P5) montage of the three orthogonal centre slices
/// (axial | coronal | sagittal), normalised to the volume maximum.
pub fn montage_pgm(vol: &ImageVolume) -> Vec<u8> {
    let [nx, ny, nz] = vol.grid.dims;
    let (cx, cy, cz) = (nx / 2, ny / 2, nz / 2);
    let height = ny.max(nz);
    let width = nx + nx + ny;
    let peak = vol.max();
    let scale = if peak > 0.0 { 255.0 / peak } else { 0.0 };
    let to_u8 = |v: f64| (v * scale).round().clamp(0.0, 255.0) as u8;
    let mut img = vec![0u8; width * height];
    for y in 0..ny {
        for x in 0..nx {
            img[y * width + x] = to_u8(vol.get(x, y, cz));
        }
    }
    for z in 0..nz {
        for x in 0..nx {
            img[(nz - 1 - z) * width + nx + x] = to_u8(vol.get(x, cy, z));
        }
        for y in 0..ny {
            img[(nz - 1 - z) * width + 2 * nx + y] = to_u8(vol.get(cx, y, z));
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&img);
    out
}
