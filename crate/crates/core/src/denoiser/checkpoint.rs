//! `SPNN` checkpoint format.
//!
//! Layout, little-endian: magic `SPNN`, `u32` version, `u32` metadata
//! length and that many bytes of `key=value` text, `u32` tensor count, then
//! per tensor a `u16` name length, the name, a `u32` rank and `u32` dims.
//! The `f32` payload follows the table in tensor order.

use std::fmt::Write as _;
use std::path::Path;

use crate::diffusion::make_schedule;
use crate::error::{Error, Result};
use crate::io::parse_key_values;

use super::net::{DataStats, NetConfig, TinyEpsNet};

const MAGIC: &[u8; 4] = b"SPNN";
const VERSION: u32 = 1;
const VELOCITY: &str = "opt.velocity";

/// A trained network plus what is needed to use or resume it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: TinyEpsNet,
    /// Data-scale constant of the network units, see the sampler.
    pub kappa: f64,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub velocity: Option<Vec<f64>>,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let cfg = self.net.config();
        let sched = self.net.schedule();
        let stats = self.net.stats();
        let mut meta = String::new();
        let _ = writeln!(meta, "n_slices={}", cfg.n_slices);
        let _ = writeln!(meta, "channels={}", cfg.channels);
        let _ = writeln!(meta, "embed_dim={}", cfg.embed_dim);
        let _ = writeln!(meta, "t_max={}", sched.t_max());
        let _ = writeln!(meta, "beta_start={}", fmt_f64(sched.beta_range().0));
        let _ = writeln!(meta, "beta_end={}", fmt_f64(sched.beta_range().1));
        let _ = writeln!(meta, "data_mean={}", fmt_f64(stats.mean));
        let _ = writeln!(meta, "data_std={}", fmt_f64(stats.std));
        let _ = writeln!(meta, "kappa={}", fmt_f64(self.kappa));
        let _ = writeln!(meta, "step={}", self.step);

        let mut tensors: Vec<(&str, Vec<usize>, &[f64])> = self.net.tensors();
        if let Some(v) = &self.velocity {
            tensors.push((VELOCITY, vec![v.len()], v));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, dims, _) in &tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
        }
        for (_, _, data) in &tensors {
            for v in data.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not an SPNN checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|_| Error::Format("metadata is not utf-8".into()))?;
        let kv = parse_key_values(meta)?;
        let get = |k: &str| -> Result<&str> {
            kv.get(k).map(String::as_str).ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {k}")))
        };
        let num = |k: &str| -> Result<f64> { get(k)?.parse::<f64>().map_err(|_| Error::Format(format!("bad number for {k}"))) };
        let int = |k: &str| -> Result<u64> { get(k)?.parse::<u64>().map_err(|_| Error::Format(format!("bad integer for {k}"))) };

        let cfg = NetConfig::new(int("n_slices")? as usize, int("channels")? as usize, int("embed_dim")? as usize)?;
        let sched = make_schedule(int("t_max")? as usize, num("beta_start")?, num("beta_end")?)?;
        let mut net = TinyEpsNet::zeros(cfg, sched);
        net.set_stats(DataStats { mean: num("data_mean")?, std: num("data_std")? });

        let n_tensors = r.u32()? as usize;
        let mut table = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            table.push((name, dims));
        }
        let layout = cfg.layout();
        let mut params = Vec::with_capacity(cfg.n_params());
        let mut velocity = None;
        for (k, (name, dims)) in table.iter().enumerate() {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<_>>()?;
            if k < layout.len() {
                if layout[k].0 != name || &layout[k].1 != dims {
                    return Err(Error::Format(format!("tensor {k} is {name} {dims:?}, expected {} {:?}", layout[k].0, layout[k].1)));
                }
                params.extend(data);
            } else if name == VELOCITY && n == cfg.n_params() {
                velocity = Some(data);
            } else {
                return Err(Error::Format(format!("unexpected tensor {name}")));
            }
        }
        if table.len() < layout.len() {
            return Err(Error::Format(format!("checkpoint has {} tensors, expected {}", table.len(), layout.len())));
        }
        if r.at != bytes.len() {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        net.set_params(params)?;
        Ok(Self { net, kappa: num("kappa")?, step: int("step")?, velocity })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.b.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
