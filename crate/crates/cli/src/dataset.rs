//! On-disk layout of simulated data sets and run outputs.
//!
//! ```text
//! <dir>/manifest.txt          config hash, geometry hash, sha256 of every file
//! <dir>/config.txt            canonical run config
//! <dir>/geometry.txt
//! <dir>/test/p000/{spec.txt, info.txt, truth.spvl, anatomy.spvl, full.sppj}
//! <dir>/test/p000/<condition>/{proj.sppj, mlem.spvl}
//! <dir>/train/t000/{spec.txt, truth.spvl, anatomy.spvl}
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use spectdiff_core::config::RunConfig;
use spectdiff_core::io::{decode_projection, decode_volume, parse_key_values, sha256_hex};
use spectdiff_core::pipeline::Condition;
use spectdiff_core::{ImageVolume, ProjectionData};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.txt";

/// Content hashes of a directory's artifacts plus run metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub meta: BTreeMap<String, String>,
    /// Relative path to sha256.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(s, "meta {k} {v}");
        }
        for (p, h) in &self.files {
            let _ = writeln!(s, "file {h} {p}");
        }
        s
    }

    pub fn from_text(text: &str) -> CliResult<Self> {
        let mut m = Manifest::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut it = line.splitn(3, ' ');
            match (it.next(), it.next(), it.next()) {
                (Some("meta"), Some(k), Some(v)) => {
                    m.meta.insert(k.into(), v.into());
                }
                (Some("file"), Some(h), Some(p)) => {
                    m.files.insert(p.into(), h.into());
                }
                _ => return Err(CliError::Data(format!("bad manifest line {line:?}"))),
            }
        }
        Ok(m)
    }

    pub fn get(&self, key: &str) -> CliResult<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| CliError::Data(format!("manifest has no {key}")))
    }
}

/// Writes files under one root and records their hashes.
pub struct ArtifactSink {
    root: PathBuf,
    manifest: Manifest,
}

impl ArtifactSink {
    /// Creates `root`. An existing non-empty directory needs `force`.
    pub fn create(root: &Path, force: bool) -> CliResult<Self> {
        if root.exists() {
            let non_empty = fs::read_dir(root).map_err(|e| CliError::io(root, e))?.next().is_some();
            if non_empty && !force {
                return Err(CliError::Config(format!("{} exists; pass --force to overwrite", root.display())));
            }
            if non_empty {
                fs::remove_dir_all(root).map_err(|e| CliError::io(root, e))?;
            }
        }
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self { root: root.to_path_buf(), manifest: Manifest::default() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn meta(&mut self, key: &str, value: impl ToString) {
        self.manifest.meta.insert(key.into(), value.to_string());
    }

    pub fn put(&mut self, rel: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.manifest.files.insert(rel.into(), sha256_hex(bytes));
        Ok(())
    }

    /// Writes the manifest and returns it.
    pub fn finish(self) -> CliResult<Manifest> {
        let path = self.root.join(MANIFEST);
        fs::write(&path, self.manifest.to_text()).map_err(|e| CliError::io(&path, e))?;
        Ok(self.manifest)
    }
}

pub fn test_dir(i: usize) -> String {
    format!("test/p{i:03}")
}

pub fn train_dir(k: usize) -> String {
    format!("train/t{k:03}")
}

pub fn read(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Counts of a simulated data set, read from its manifest and config.
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    /// Config the data set was simulated with.
    pub config: RunConfig,
    pub n_test: usize,
    pub n_train: usize,
}

impl Dataset {
    /// Opens a data set and checks every listed file against its hash.
    pub fn open(root: &Path) -> CliResult<Self> {
        let manifest = Manifest::from_text(&read_text(&root.join(MANIFEST))?)?;
        for (rel, hash) in &manifest.files {
            let path = root.join(rel);
            if sha256_hex(&read(&path)?) != *hash {
                return Err(CliError::Data(format!("{} does not match its manifest hash", path.display())));
            }
        }
        let config =
            RunConfig::from_text(&read_text(&root.join("config.txt"))?).map_err(|e| CliError::Data(format!("data set config: {e}")))?;
        let count = |prefix: &str| manifest.files.keys().filter(|p| p.starts_with(prefix) && p.ends_with("/truth.spvl")).count();
        let (n_test, n_train) = (count("test/"), count("train/"));
        Ok(Self { root: root.to_path_buf(), manifest, config, n_test, n_train })
    }

    pub fn geometry_hash(&self) -> CliResult<&str> {
        self.manifest.get("geometry_hash")
    }

    /// Refuses a scanner or grid other than the one the data were made
    /// with; `hash` is the full system matrix's geometry hash.
    pub fn check_compatible(&self, hash: &str) -> CliResult<()> {
        let have = self.geometry_hash()?;
        if have != hash {
            return Err(CliError::Data(format!("geometry hash {hash} of the run differs from the data set's {have}")));
        }
        Ok(())
    }

    pub fn volume(&self, rel: &str) -> CliResult<ImageVolume> {
        Ok(decode_volume(&read(&self.root.join(rel))?)?)
    }

    pub fn projection(&self, rel: &str) -> CliResult<ProjectionData> {
        Ok(decode_projection(&read(&self.root.join(rel))?)?)
    }

    fn check_test(&self, i: usize) -> CliResult<()> {
        if i >= self.n_test {
            return Err(CliError::Config(format!("phantom {i} out of range; the data set has {}", self.n_test)));
        }
        Ok(())
    }

    /// Truth, anatomy and the truth-to-counts scale of held-out phantom `i`.
    pub fn test_phantom(&self, i: usize) -> CliResult<(ImageVolume, ImageVolume, f64)> {
        self.check_test(i)?;
        let d = test_dir(i);
        let info = parse_key_values(&read_text(&self.root.join(format!("{d}/info.txt")))?)?;
        let scale = info
            .get("count_scale")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::Data(format!("{d}/info.txt lacks count_scale")))?;
        Ok((self.volume(&format!("{d}/truth.spvl"))?, self.volume(&format!("{d}/anatomy.spvl"))?, scale))
    }

    fn condition_dir(&self, i: usize, cond: &Condition) -> CliResult<String> {
        self.check_test(i)?;
        let d = format!("{}/{cond}", test_dir(i));
        if !self.manifest.files.contains_key(&format!("{d}/proj.sppj")) {
            return Err(CliError::Data(format!("data set has no {cond} acquisition")));
        }
        Ok(d)
    }

    /// Degraded projections of phantom `i` under `cond`.
    pub fn degraded(&self, i: usize, cond: &Condition) -> CliResult<ProjectionData> {
        self.projection(&format!("{}/proj.sppj", self.condition_dir(i, cond)?))
    }

    /// MLEM baseline of phantom `i` under `cond`.
    pub fn baseline(&self, i: usize, cond: &Condition) -> CliResult<ImageVolume> {
        self.volume(&format!("{}/mlem.spvl", self.condition_dir(i, cond)?))
    }

    /// Clean activity and anatomy of training phantom `k`.
    pub fn train_phantom(&self, k: usize) -> CliResult<(ImageVolume, ImageVolume)> {
        let d = train_dir(k);
        Ok((self.volume(&format!("{d}/truth.spvl"))?, self.volume(&format!("{d}/anatomy.spvl"))?))
    }
}
