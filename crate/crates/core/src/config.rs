//! Run configuration shared by the command suite.
//!
//! A [`RunConfig`] is loaded from TOML or JSON; missing fields take defaults
//! and the top-level `seed` is copied into every component before use.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SplitCounts, SynthConfig};
use crate::error::{Error, Result, Violations};
use crate::eval::{validate_regimes, ModelVariant, RegimeSpec, ReportFormat};
use crate::fingerprint;
use crate::infer::InferenceConfig;
use crate::nets::{ConditioningMode, RegHead, RegSpec};
use crate::scin::{DEFAULT_BINS, DEFAULT_SAMPLES_PER_BIN};
use crate::train::{GenArch, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    /// Manifest file, directory holding `manifest.json`, or interleaved TIFF.
    pub path: PathBuf,
    #[serde(default)]
    pub clip_quantile: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScinParams {
    pub n_bins: usize,
    pub samples_per_bin: usize,
    /// Defaults to the training patch size.
    pub patch_size: Option<usize>,
}

impl Default for ScinParams {
    fn default() -> Self {
        Self {
            n_bins: DEFAULT_BINS,
            samples_per_bin: DEFAULT_SAMPLES_PER_BIN,
            patch_size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    pub regimes: Vec<RegimeSpec>,
    /// Variant tokens, see [`ModelVariant::parse`].
    pub variants: Vec<String>,
    pub sweep_actual_w: Vec<f32>,
    pub sweep_assumed_w: Vec<f32>,
    pub formats: Vec<ReportFormat>,
    pub plot_data: bool,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            regimes: RegimeSpec::defaults(),
            variants: vec!["full".into(), "fixed:0.5".into(), "-agg".into()],
            sweep_actual_w: vec![0.3, 0.5, 0.7],
            sweep_assumed_w: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
            formats: vec![ReportFormat::Csv, ReportFormat::Json],
            plot_data: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Synthetic data; used when `dataset` is absent.
    pub synth: SynthConfig,
    pub dataset: Option<DatasetSource>,
    pub scin: ScinParams,
    pub train: TrainConfig,
    pub infer: InferenceConfig,
    pub eval: EvalParams,
    pub out: PathBuf,
    pub seed: u64,
    /// Omit wall-clock fields from reports so reruns are byte-identical.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            dataset: None,
            scin: ScinParams::default(),
            train: TrainConfig::default(),
            infer: InferenceConfig::default(),
            eval: EvalParams::default(),
            out: PathBuf::from("runs/default"),
            seed: 0,
            deterministic: true,
        }
    }
}

impl RunConfig {
    /// Small networks and budgets that run end to end in a few minutes on one
    /// CPU core.
    pub fn desk() -> Self {
        let mut cfg = Self {
            out: PathBuf::from("runs/desk"),
            ..Self::default()
        };
        cfg.synth.frames_per_split = SplitCounts {
            train: 96,
            val: 8,
            test: 16,
        };
        cfg.synth.density = [20.0, 20.0];
        cfg.synth.frame_jitter = 0.0;
        cfg.scin.samples_per_bin = 500;
        cfg.train = TrainConfig {
            batch_size: 8,
            max_steps: 1500,
            patch_size: 32,
            val_every: 250,
            val_patches: 4,
            gen_arch: GenArch {
                depth: 3,
                base_width: 8,
                conditioning_mode: ConditioningMode::ScalarBroadcastConcat,
            },
            reg_spec: RegSpec {
                depth: 3,
                base_width: 8,
                head: RegHead::SigmoidBounded,
                hidden: 32,
            },
            ..TrainConfig::default()
        };
        cfg.seed = 3;
        cfg.with_seed(3)
    }

    /// Sets the master seed and copies it into every component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
        self.infer.seed = seed;
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)?,
            Some("toml") => toml::from_str(&text).map_err(|e| {
                Error::config(format!("{}: {}", path.display(), e.message()))
            })?,
            _ => {
                return Err(Error::config(format!(
                    "{}: config must be .toml or .json",
                    path.display()
                )))
            }
        };
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    pub fn scin_patch_size(&self) -> usize {
        self.scin.patch_size.unwrap_or(self.train.patch_size)
    }

    pub fn variants(&self) -> Result<Vec<ModelVariant>> {
        self.eval
            .variants
            .iter()
            .map(|t| ModelVariant::parse(t, &self.infer))
            .collect()
    }

    /// Checks every section and reports all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut v = Violations::new();
        match &self.dataset {
            Some(d) => {
                v.check(d.path.exists(), || {
                    format!("dataset.path {} does not exist", d.path.display())
                });
                if let Some(q) = d.clip_quantile {
                    v.check(q > 0.0 && q <= 1.0, || {
                        format!("dataset.clip_quantile {q} must lie in (0, 1]")
                    });
                }
            }
            None => v.extend_from(self.synth.validate(), "synth"),
        }
        v.check(self.scin.n_bins >= 1, || "scin.n_bins must be positive".into());
        v.check(self.scin.samples_per_bin >= 1, || {
            "scin.samples_per_bin must be positive".into()
        });
        v.extend_from(self.train.validate(), "train");
        v.extend_from(self.infer.validate(), "infer");
        v.extend_from(validate_regimes(&self.eval.regimes), "eval");
        for t in &self.eval.variants {
            v.extend_from(ModelVariant::parse(t, &self.infer).map(|_| ()), "eval.variants");
        }
        for &w in self.eval.sweep_actual_w.iter().chain(&self.eval.sweep_assumed_w) {
            v.check((0.0..=1.0).contains(&w), || {
                format!("eval sweep weight {w} outside [0, 1]")
            });
        }
        v.into_result()
    }

    /// Fingerprint of everything except the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        fingerprint::of_json("scsplit.run-config", &c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}
