//! Run configuration: TOML file, dotted-path overrides, defaults.

use std::path::{Path, PathBuf};

use dias_core::data::{Split, SplitSpec};
use dias_core::model::ModelConfig;
use dias_core::selftrain::RpstConfig;
use dias_core::supervision::WssConfig;
use dias_core::tools::{ProjectionMode, RdfaConfig, SynthSpec};
use dias_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DATA_ROOT_ENV: &str = "DIAS_DATA_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config syntax error: {0}")]
    Syntax(String),

    #[error("override `{0}` must look like key=value")]
    Override(String),

    #[error("override `{key}` cannot descend into non-table value")]
    NotATable { key: String },

    #[error("config key `{key}`: {message}")]
    Invalid { key: String, message: String },

    #[error("config key `{key}` is required and has no default")]
    Missing { key: String },

    #[error("unsupported device `{0}`; only `cpu` is available")]
    Device(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset root; falls back to the DIAS_DATA_ROOT environment variable.
    pub root: Option<PathBuf>,
    pub split: SplitSpec,
    /// Use only the first this many labeled training sequences.
    pub labeled_count: Option<usize>,
    /// Use only the first this many unlabeled sequences.
    pub unlabeled_count: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: Split,
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<patient>/<sequence>.png` probability maps.
    pub predictions: Option<PathBuf>,
    pub csv: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: Split::Test,
            checkpoint: None,
            predictions: None,
            csv: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    /// Output dataset root; defaults to `data.root`.
    pub out: Option<PathBuf>,
    pub labeled: usize,
    pub unlabeled: usize,
    /// Also write RDFA scribbles for labeled sequences.
    pub scribbles: bool,
    pub spec: SynthSpec,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            out: None,
            labeled: 12,
            unlabeled: 8,
            scribbles: true,
            spec: SynthSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectSection {
    pub mode: ProjectionMode,
    /// Output dataset root for projected sequences.
    pub out: Option<PathBuf>,
}

impl Default for ProjectSection {
    fn default() -> Self {
        Self {
            mode: ProjectionMode::Full,
            out: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlotSection {
    /// Run directory to render; defaults to the newest run.
    pub run: Option<PathBuf>,
    /// Number of segmentation overlays to render.
    pub overlays: usize,
}

impl Default for PlotSection {
    fn default() -> Self {
        Self { run: None, overlays: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub device: String,
    pub runs_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub wss: WssConfig,
    pub rpst: RpstConfig,
    pub eval: EvalSection,
    pub rdfa: RdfaConfig,
    pub synth: SynthSection,
    pub project: ProjectSection,
    pub plot: PlotSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            device: "cpu".into(),
            runs_dir: PathBuf::from("runs"),
            data: DataSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            wss: WssConfig::default(),
            rpst: RpstConfig::default(),
            eval: EvalSection::default(),
            rdfa: RdfaConfig::default(),
            synth: SynthSection::default(),
            project: ProjectSection::default(),
            plot: PlotSection::default(),
        }
    }
}

/// Parses a right-hand side as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` inside `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(assignment.to_string()));
    }
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| ConfigError::NotATable { key: key.to_string() })?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Builds a config from optional TOML text plus overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let value = toml::Value::Table(table);
        serde_path_to_error::deserialize(value).map_err(|e| ConfigError::Invalid {
            key: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.to_path_buf(),
                source,
            })?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn check_device(&self) -> Result<(), ConfigError> {
        if self.device == "cpu" {
            Ok(())
        } else {
            Err(ConfigError::Device(self.device.clone()))
        }
    }

    /// Dataset root from the config or the environment.
    pub fn data_root(&self) -> Result<PathBuf, ConfigError> {
        self.data
            .root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .ok_or_else(|| ConfigError::Missing {
                key: "data.root".into(),
            })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical TOML snapshot.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn overrides_survive_the_snapshot(epochs in 1usize..10_000, seed in 0..=i64::MAX as u64, lr in 1e-7f64..1.0) {
            let c = RunConfig::from_toml_str("", &[
                format!("train.epochs={epochs}"),
                format!("seed={seed}"),
                format!("train.lr={lr:?}"),
            ]).unwrap();
            prop_assert_eq!(c.train.epochs, epochs);
            prop_assert_eq!(c.seed, seed);
            prop_assert_eq!(c.train.lr, lr);
            let back = RunConfig::from_toml_str(&c.to_toml(), &[]).unwrap();
            prop_assert_eq!(back.hash(), c.hash());
        }
    }

    #[test]
    fn empty_config_is_the_default() {
        let c = RunConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.patch_size, 64);
        assert_eq!(c.train.batch_size, 64);
        assert_eq!(c.train.lr, 5e-4);
        assert_eq!(c.train.epochs, 100);
        assert_eq!(c.wss.lambda1, 1.0);
        assert_eq!(c.wss.lambda2, 0.5);
        assert_eq!(c.rpst.p, 0.5);
        assert_eq!(c.model.seq_len, 8);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = RunConfig::from_toml_str(
            "[train]\nepochs = 3\n",
            &["train.epochs=7".into(), "model.channels=[4, 8]".into(), "name=sweep".into()],
        )
        .unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.model.channels, vec![4, 8]);
        assert_eq!(c.name, "sweep");
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml_str("", &["train.epochz=3".into()]).unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
        let err = RunConfig::from_toml_str("[wss]\nlambda3 = 1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("lambda3"), "{err}");
    }

    #[test]
    fn type_mismatch_names_the_key() {
        let err = RunConfig::from_toml_str("[train]\nepochs = \"many\"\n", &[]).unwrap_err();
        match err {
            ConfigError::Invalid { key, .. } => assert_eq!(key, "train.epochs"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn malformed_override_rejected() {
        assert!(matches!(
            RunConfig::from_toml_str("", &["train.epochs".into()]),
            Err(ConfigError::Override(_))
        ));
        assert!(matches!(
            RunConfig::from_toml_str("", &["name=\"a\"".into(), "name.x=1".into()]),
            Err(ConfigError::NotATable { .. })
        ));
    }

    #[test]
    fn missing_data_root_names_the_key() {
        let c = RunConfig::default();
        if std::env::var_os(DATA_ROOT_ENV).is_none() {
            let err = c.data_root().unwrap_err();
            assert!(err.to_string().contains("data.root"));
        }
    }

    #[test]
    fn snapshot_roundtrips_and_hash_is_stable() {
        let c = RunConfig::from_toml_str("", &["seed=9".into(), "data.root=\"/tmp/x\"".into()]).unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(RunConfig::default().hash(), c.hash());
    }

    #[test]
    fn only_cpu_device() {
        let mut c = RunConfig::default();
        assert!(c.check_device().is_ok());
        c.device = "cuda:0".into();
        assert!(matches!(c.check_device(), Err(ConfigError::Device(_))));
    }
}
