//! Run configuration: one TOML file with a section per command, layered
//! overrides and a resolved snapshot written next to every run's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corruption::CorruptionKind;
use crate::error::{Error, Result};
use crate::eval::PckNorm;
use crate::manifest::Split;
use crate::synthetic::SynthSpec;
use crate::trainer::TrainConfig;

/// Environment variable overriding `data_root`.
pub const DATA_ROOT_ENV: &str = "CORRLAB_DATA_ROOT";

pub const SNAPSHOT_NAME: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the seeds of the synth and train sections.
    pub seed: Option<u64>,
    /// Directory holding `manifest.json` and the images.
    pub data_root: PathBuf,
    pub output_root: PathBuf,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    /// Fraction of training images kept annotated (whole images, nested
    /// across fractions). 1 keeps the manifest as is.
    pub labeled_fraction: f64,
    pub synth: SynthSpec,
    pub train: TrainConfig,
    pub annotate: AnnotateConfig,
    pub eval: EvalConfig,
    pub corrupt: CorruptConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            data_root: PathBuf::from("data"),
            output_root: PathBuf::from("runs"),
            workers: 0,
            labeled_fraction: 1.0,
            synth: SynthSpec::default(),
            train: TrainConfig::default(),
            annotate: AnnotateConfig::default(),
            eval: EvalConfig::default(),
            corrupt: CorruptConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotateConfig {
    pub tau: f64,
    pub unlabeled_per_class: usize,
    /// Sampling round; different rounds draw different batches.
    pub iteration: u64,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        AnnotateConfig { tau: 0.7, unlabeled_per_class: 16, iteration: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub alphas: Vec<f64>,
    pub norm: PckNorm,
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { alphas: vec![0.1, 0.05, 0.01], norm: PckNorm::Bbox, split: Split::Test }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptConfig {
    pub seed: u64,
    /// Kind names; empty means all fifteen.
    pub kinds: Vec<String>,
}

impl CorruptConfig {
    pub fn kinds(&self) -> Result<Vec<CorruptionKind>> {
        if self.kinds.is_empty() {
            return Ok(CorruptionKind::ALL.to_vec());
        }
        self.kinds.iter().map(|k| k.parse()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub tau: Vec<f64>,
    pub alpha: Vec<f64>,
    pub labeled_fraction: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            tau: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            alpha: vec![0.1, 0.08, 0.06, 0.04, 0.02, 0.01],
            labeled_fraction: vec![0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

impl RunConfig {
    /// Parses a config document. Unknown keys are errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// File contents (if any), then `key=value` overrides with dotted keys,
    /// then the data-root environment variable when `data_root` was not
    /// overridden explicitly. The result is resolved and validated.
    pub fn layered(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let mut data_root_set = false;
        for o in overrides {
            let (key, value) = parse_override(o)?;
            data_root_set |= key == "data_root";
            set_dotted(&mut table, &key, value)?;
        }
        if !data_root_set {
            if let Some(v) = std::env::var_os(DATA_ROOT_ENV) {
                let v = v.into_string().map_err(|_| Error::Config(format!("{DATA_ROOT_ENV} is not valid UTF-8")))?;
                table.insert("data_root".into(), toml::Value::String(v));
            }
        }
        let mut cfg = Self::from_table(table)?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pushes the global seed into the sections.
    pub fn resolve(&mut self) {
        if let Some(s) = self.seed {
            self.synth.seed = s;
            self.train.seed = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.synth.validate().map_err(cfg_err)?;
        self.train.validate().map_err(cfg_err)?;
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::Config("labeled_fraction must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.annotate.tau) {
            return Err(Error::Config("annotate.tau must lie in [0, 1]".into()));
        }
        if self.annotate.unlabeled_per_class == 0 {
            return Err(Error::Config("annotate.unlabeled_per_class must be at least 1".into()));
        }
        if self.eval.alphas.is_empty() || self.eval.alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::Config("eval.alphas must be non-empty values in (0, 1]".into()));
        }
        self.corrupt.kinds().map_err(cfg_err)?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SNAPSHOT_NAME);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data_root.join("manifest.json")
    }
}

fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s.split_once('=').ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let key = key.trim().to_string();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{s}` has an empty key")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((key, value))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_snapshot() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[train]\nlamda = 1.0"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("[nosuch]\nx = 1"), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_win_over_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 3\n[train]\ntau = 0.5\n").unwrap();
        let cfg = RunConfig::layered(Some(&p), &["train.tau=0.9".into(), "eval.norm=\"img\"".into()]).unwrap();
        assert_eq!(cfg.train.tau, 0.9);
        assert_eq!(cfg.eval.norm, PckNorm::Img);
        assert_eq!(cfg.synth.seed, 3);
        assert_eq!(cfg.train.seed, 3);
    }

    #[test]
    fn bare_strings_are_accepted_in_overrides() {
        let cfg = RunConfig::layered(None, &["output_root=out/x".into(), "train.filter_bank=grid".into()]).unwrap();
        assert_eq!(cfg.output_root, PathBuf::from("out/x"));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for o in ["train.tau=1.5", "labeled_fraction=0", "corrupt.kinds=[\"motion\"]", "annotate.unlabeled_per_class=0"] {
            let err = RunConfig::layered(None, &[o.into()]).unwrap_err();
            assert!(err.is_config_error(), "{o}: {err}");
        }
        assert!(RunConfig::layered(None, &["novalue".into()]).unwrap_err().is_config_error());
    }

    #[test]
    fn snapshot_reproduces_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::layered(None, &["seed=11".into(), "train.lambda=0.25".into()]).unwrap();
        let p = cfg.write_snapshot(dir.path()).unwrap();
        let again = RunConfig::layered(Some(&p), &[]).unwrap();
        assert_eq!(again.train, cfg.train);
        assert_eq!(again.synth, cfg.synth);
    }
}
