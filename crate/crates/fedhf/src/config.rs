//! Experiment configuration: JSON file plus command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use fedhf_core::datahub::{PartitionConfig, SynthSpec};
use fedhf_core::federation::FederationConfig;
use fedhf_core::imputer::ImputerConfig;
use fedhf_core::trainer::TrainConfig;
use fedhf_core::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Csv {
        path: PathBuf,
        #[serde(default)]
        missing_token: Option<String>,
    },
    Synthetic(SynthSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    InProcess,
    MultiProcess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Standardization {
    PerClient,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fedhf,
    Fedmean,
    Oracle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fedhf => "fedhf",
            Method::Fedmean => "fedmean",
            Method::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> anyhow::Result<Self> {
        Ok(match s.trim() {
            "fedhf" => Method::Fedhf,
            "fedmean" => Method::Fedmean,
            "oracle" => Method::Oracle,
            other => bail!("unknown method `{other}` (expected fedhf, fedmean or oracle)"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub clients: usize,
    pub keep: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub standardization: Standardization,
    pub graph_k: usize,
    pub min_support: usize,
    pub imputer: ImputerConfig,
    pub train: TrainConfig,
    pub federation: FederationConfig,
    pub corrupt: f64,
    pub seeds: usize,
    pub methods: Vec<Method>,
    pub mode: Mode,
    pub listen: String,
    pub workers: usize,
    pub out: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic(SynthSpec::default()),
            clients: 4,
            keep: 0.6,
            validation_fraction: 0.1,
            test_fraction: 0.15,
            standardization: Standardization::PerClient,
            graph_k: fedhf_core::featgraph::DEFAULT_K,
            min_support: fedhf_core::featgraph::DEFAULT_MIN_SUPPORT,
            imputer: ImputerConfig::default(),
            train: TrainConfig::default(),
            federation: FederationConfig::default(),
            corrupt: 0.2,
            seeds: 5,
            methods: vec![Method::Fedhf, Method::Fedmean, Method::Oracle],
            mode: Mode::InProcess,
            listen: "127.0.0.1:7070".into(),
            workers: 1,
            out: default_out(),
            seed: 0,
        }
    }
}

fn default_out() -> PathBuf {
    std::env::var_os("FEDHF_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn partition(&self) -> PartitionConfig {
        PartitionConfig {
            n_clients: self.clients,
            keep_fraction: self.keep,
            validation_fraction: self.validation_fraction,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |field, reason: String| Err(Error::InvalidConfig { field, reason });
        self.partition().validate()?;
        self.imputer.validate()?;
        self.train.validate()?;
        self.federation.validate(self.clients)?;
        if let DatasetSource::Synthetic(s) = &self.dataset {
            if s.n_features < 2 || s.n_factors == 0 || s.n_factors >= s.n_features {
                return bad("synthetic", format!("need 0 < factors < features, got {s:?}"));
            }
            if s.n_rows == 0 || !(s.noise_std >= 0.0) || !s.loading_scale.is_finite() {
                return bad("synthetic", format!("invalid spec {s:?}"));
            }
        }
        if !(0.0..1.0).contains(&self.test_fraction) || self.test_fraction == 0.0 {
            return bad("test_fraction", format!("{} not in (0, 1)", self.test_fraction));
        }
        if self.graph_k == 0 {
            return bad("graph_k", "must be at least 1".into());
        }
        if self.min_support < 2 {
            return bad("min_support", format!("{} is below 2", self.min_support));
        }
        if !(self.corrupt > 0.0 && self.corrupt < 1.0) {
            return bad("corrupt", format!("{} not in (0, 1)", self.corrupt));
        }
        if self.seeds == 0 {
            return bad("seeds", "must be at least 1".into());
        }
        if self.methods.is_empty() {
            return bad("methods", "no methods selected".into());
        }
        if self.workers == 0 {
            return bad("workers", "must be at least 1".into());
        }
        Ok(())
    }

    /// Fields that determine the data, shards and training; excludes where
    /// and how the run executes. Clients and server compare its hash.
    pub fn identity_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            for key in ["mode", "listen", "workers", "out", "seeds", "methods"] {
                obj.remove(key);
            }
        }
        serde_json::to_string(&v).expect("value serializes")
    }

    pub fn identity_hash(&self) -> String {
        fedhf_core::seed::sha256_hex(self.identity_json().as_bytes())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(format!("seed-{}", self.seed))
    }
}

/// Parses `f=13,factors=3,rows=1000,noise=0.5,scale=1.0`; omitted keys keep
/// their defaults.
pub fn parse_synthetic(spec: &str) -> anyhow::Result<SynthSpec> {
    let mut s = SynthSpec::default();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .with_context(|| format!("synthetic spec entry `{part}` is not key=value"))?;
        let bad = || format!("bad value `{value}` for synthetic `{key}`");
        match key.trim() {
            "f" | "features" => s.n_features = value.parse().with_context(bad)?,
            "factors" => s.n_factors = value.parse().with_context(bad)?,
            "rows" | "n" => s.n_rows = value.parse().with_context(bad)?,
            "noise" => s.noise_std = value.parse().with_context(bad)?,
            "scale" => s.loading_scale = value.parse().with_context(bad)?,
            other => bail!("unknown synthetic key `{other}` (expected f, factors, rows, noise, scale)"),
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_json() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"clients": 4, "colour": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"train": {"lr": 0.1}}"#).is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = ExperimentConfig::from_json(r#"{"clients": 3, "dataset": {"synthetic": {"n_rows": 50, "n_features": 5, "n_factors": 2, "noise_std": 0.1}}}"#).unwrap();
        assert_eq!(c.clients, 3);
        assert_eq!(c.keep, 0.6);
    }

    #[test]
    fn synthetic_spec() {
        let s = parse_synthetic("f=13,factors=3").unwrap();
        assert_eq!((s.n_features, s.n_factors, s.n_rows), (13, 3, 1000));
        assert!(parse_synthetic("f=13,colour=2").is_err());
        assert!(parse_synthetic("f").is_err());
    }

    #[test]
    fn rho_out_of_range_names_field() {
        let mut c = ExperimentConfig::default();
        c.train.block_fraction = 1.5;
        let e = c.validate().unwrap_err();
        assert!(e.to_string().contains("rho"), "{e}");
    }

    #[test]
    fn identity_ignores_execution_fields() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.out = "elsewhere".into();
        b.mode = Mode::MultiProcess;
        assert_eq!(a.identity_hash(), b.identity_hash());
        b.clients = 3;
        assert_ne!(a.identity_hash(), b.identity_hash());
    }
}
