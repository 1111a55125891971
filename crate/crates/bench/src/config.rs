use std::path::{Path, PathBuf};

use clap::ValueEnum;
use ltp::receiver::NetworkProfile;
use ltp::sync::SyncMode;
use serde::Deserialize;

use crate::{BenchError, ExperimentSpec, Format};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModeName {
    LossTolerant,
    Reliable,
}

impl From<ModeName> for SyncMode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::LossTolerant => SyncMode::LossTolerant,
            ModeName::Reliable => SyncMode::ReliableBaseline,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProfileName {
    Dcn,
    Wan,
}

impl From<ProfileName> for NetworkProfile {
    fn from(p: ProfileName) -> Self {
        match p {
            ProfileName::Dcn => NetworkProfile::Dcn,
            ProfileName::Wan => NetworkProfile::Wan,
        }
    }
}

/// A scalar or a list, so `loss = 0.01` and `loss = [0, 0.01]` both parse.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(x) => vec![x],
            OneOrMany::Many(xs) => xs,
        }
    }
}

/// Flat `key = value` file whose keys are the long CLI flags.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct FileConfig {
    pub workers: Option<usize>,
    pub model_bytes: Option<usize>,
    loss: Option<OneOrMany<f64>>,
    pub batches: Option<usize>,
    pub epochs: Option<usize>,
    mode: Option<OneOrMany<ModeName>>,
    pub profile: Option<ProfileName>,
    pub pct_threshold: Option<f64>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub real_udp: Option<bool>,
}

impl FileConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, BenchError> {
        toml::from_str(text).map_err(|source| BenchError::Config { path: path.to_owned(), source })
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| BenchError::Io { path: path.to_owned(), source })?;
        Self::parse(&text, path)
    }

    pub fn loss(&self) -> Option<Vec<f64>> {
        self.loss.clone().map(OneOrMany::into_vec)
    }

    pub fn modes(&self) -> Option<Vec<ModeName>> {
        self.mode.clone().map(OneOrMany::into_vec)
    }

    /// Overwrites every field of `spec` that this file sets.
    pub fn apply(&self, spec: &mut ExperimentSpec) {
        if let Some(v) = self.workers {
            spec.n_workers = v;
        }
        if let Some(v) = self.model_bytes {
            spec.model_bytes = v;
        }
        if let Some(v) = self.loss() {
            spec.loss_grid = v;
        }
        if let Some(v) = self.batches {
            spec.batches = v;
        }
        if let Some(v) = self.epochs {
            spec.epochs = v;
        }
        if let Some(v) = self.modes() {
            spec.modes = v.into_iter().map(SyncMode::from).collect();
        }
        if let Some(v) = self.profile {
            spec.profile = v.into();
        }
        if let Some(v) = self.pct_threshold {
            spec.pct_threshold = v;
        }
        if let Some(v) = self.seed {
            spec.seed = v;
        }
        if let Some(v) = self.real_udp {
            spec.real_udp = v;
        }
    }
}
