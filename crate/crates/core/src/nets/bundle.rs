//! Deployable model directory: three parameter blobs, the normalization table
//! and a manifest tying them together.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GenSpec, Generator, RegSpec, Regressor};
use crate::error::{Error, Result};
use crate::fingerprint::{self, Hasher};
use crate::scin::{ScinTable, TargetChannelStats};

pub const BUNDLE_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const TABLE: &str = "scin_table.json";
const GEN0: &str = "gen0.bin";
const GEN1: &str = "gen1.bin";
const REG: &str = "reg.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub version: u32,
    pub gen0_spec: GenSpec,
    pub gen1_spec: GenSpec,
    pub reg_spec: RegSpec,
    pub scin_fingerprint: String,
    pub dataset_fingerprint: String,
    pub target_stats: TargetChannelStats,
    pub learning_rate: f64,
    pub train_config: serde_json::Value,
    pub train_config_hash: String,
    pub params_fingerprint: ParamsFingerprint,
    pub metrics: serde_json::Value,
    pub nondeterminism: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamsFingerprint {
    pub gen0: String,
    pub gen1: String,
    pub reg: String,
}

/// `Gen_0`, `Gen_1` and `Reg` together with the table and target statistics
/// they were trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub gen0: Generator,
    pub gen1: Generator,
    pub reg: Regressor,
    pub table: ScinTable,
    pub target_stats: TargetChannelStats,
    pub learning_rate: f64,
    pub train_config: serde_json::Value,
    pub metrics: serde_json::Value,
}

fn params_fp(domain: &str, p: &[f32]) -> String {
    Hasher::new(domain).f32s(p).finish()
}

impl ModelBundle {
    pub fn fingerprint(&self) -> String {
        fingerprint::of_json("scsplit.bundle.v1", &self.manifest())
    }

    pub fn manifest(&self) -> BundleManifest {
        BundleManifest {
            version: BUNDLE_VERSION,
            gen0_spec: self.gen0.spec().clone(),
            gen1_spec: self.gen1.spec().clone(),
            reg_spec: self.reg.spec().clone(),
            scin_fingerprint: self.table.fingerprint(),
            dataset_fingerprint: self.table.dataset_fingerprint.clone(),
            target_stats: self.target_stats,
            learning_rate: self.learning_rate,
            train_config_hash: fingerprint::of_json("scsplit.train-config", &self.train_config),
            train_config: self.train_config.clone(),
            params_fingerprint: ParamsFingerprint {
                gen0: params_fp("gen0", self.gen0.params()),
                gen1: params_fp("gen1", self.gen1.params()),
                reg: params_fp("reg", self.reg.params()),
            },
            metrics: self.metrics.clone(),
            nondeterminism: Vec::new(),
        }
    }

    /// Writes the bundle to `dir` atomically: everything goes to a sibling
    /// temporary directory which is then renamed into place.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let parent = dir
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let name = dir
            .file_name()
            .ok_or_else(|| Error::config(format!("bundle path {} has no name", dir.display())))?;
        let tmp: PathBuf = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        write_blob(&tmp.join(GEN0), self.gen0.params())?;
        write_blob(&tmp.join(GEN1), self.gen1.params())?;
        write_blob(&tmp.join(REG), self.reg.params())?;
        self.table.save(&tmp.join(TABLE))?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        let mp = tmp.join(MANIFEST);
        fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    /// Loads a bundle and verifies that the table, parameters and manifest
    /// agree. `expected_scin` additionally pins the table fingerprint.
    pub fn load(dir: &Path, expected_scin: Option<&str>) -> Result<Self> {
        let mp = dir.join(MANIFEST);
        let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let m: BundleManifest = serde_json::from_str(&text)?;
        if m.version != BUNDLE_VERSION {
            return Err(Error::Format(format!("unsupported bundle version {}", m.version)));
        }
        let table = ScinTable::load(&dir.join(TABLE), None)?;
        let fp = table.fingerprint();
        if fp != m.scin_fingerprint {
            return Err(Error::Fingerprint {
                expected: m.scin_fingerprint,
                found: fp,
            });
        }
        if let Some(want) = expected_scin {
            if want != fp {
                return Err(Error::Fingerprint {
                    expected: want.to_string(),
                    found: fp,
                });
            }
        }
        let gen0 = Generator::from_params(m.gen0_spec.clone(), read_blob(&dir.join(GEN0))?)?;
        let gen1 = Generator::from_params(m.gen1_spec.clone(), read_blob(&dir.join(GEN1))?)?;
        let reg = Regressor::from_params(m.reg_spec.clone(), read_blob(&dir.join(REG))?)?;
        for (name, want, p) in [
            ("gen0", &m.params_fingerprint.gen0, gen0.params()),
            ("gen1", &m.params_fingerprint.gen1, gen1.params()),
            ("reg", &m.params_fingerprint.reg, reg.params()),
        ] {
            let got = params_fp(name, p);
            if &got != want {
                return Err(Error::Fingerprint {
                    expected: want.clone(),
                    found: got,
                });
            }
        }
        m.target_stats.validate()?;
        Ok(Self {
            gen0,
            gen1,
            reg,
            table,
            target_stats: m.target_stats,
            learning_rate: m.learning_rate,
            train_config: m.train_config,
            metrics: m.metrics,
        })
    }
}

fn write_blob(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
