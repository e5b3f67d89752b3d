use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fedgraph_core::FederationConfig;
use fedgraph_core::SplitMode;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Directory holding `u.data` and `u.user`.
    #[default]
    Ml100k,
    /// Tab-separated `user item rating [timestamp]` file.
    Tsv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default)]
    pub name: DatasetKind,
    pub data: PathBuf,
    /// Keep only the users with the smallest ids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_users: Option<usize>,
    #[serde(default)]
    pub split: SplitMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Hash,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub d1: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Prompt template; `{field}` placeholders name profile attributes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            kind: EncoderKind::Hash,
            d1: fedgraph_core::text::DEFAULT_TEXT_DIM,
            seed: 0,
            path: None,
            template: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub metrics: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph_dump: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<PathBuf>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec {
            metrics: PathBuf::from("metrics.csv"),
            graph_dump: None,
            snapshot: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub encoder: EncoderSpec,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub output: OutputSpec,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = toml::from_str(text).context("invalid experiment config")?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing config")
    }

    /// Schema-independent checks: numeric ranges and referenced inputs.
    pub fn validate(&self) -> Result<()> {
        self.federation.validate().context("invalid [federation] section")?;
        match self.dataset.name {
            DatasetKind::Ml100k => {
                let (data, user) = fedgraph_core::data::movielens_paths(&self.dataset.data);
                for p in [data, user] {
                    if !p.is_file() {
                        bail!("dataset file {} does not exist", p.display());
                    }
                }
            }
            DatasetKind::Tsv => {
                if !self.dataset.data.is_file() {
                    bail!("dataset file {} does not exist", self.dataset.data.display());
                }
            }
        }
        if self.dataset.max_users == Some(0) {
            bail!("dataset.max_users must be positive");
        }
        match (self.encoder.kind, &self.encoder.path) {
            (EncoderKind::File, None) => bail!("encoder.kind = \"file\" requires encoder.path"),
            (EncoderKind::File, Some(p)) if !p.is_file() => {
                bail!("embedding file {} does not exist", p.display())
            }
            (EncoderKind::Hash, _) if self.encoder.d1 < 8 => bail!("encoder.d1 must be >= 8"),
            _ => {}
        }
        Ok(())
    }

    /// Makes relative input and output paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.data);
        if let Some(p) = self.encoder.path.as_mut() {
            fix(p);
        }
        fix(&mut self.output.metrics);
        if let Some(p) = self.output.graph_dump.as_mut() {
            fix(p);
        }
        if let Some(p) = self.output.snapshot.as_mut() {
            fix(p);
        }
    }

    /// Moves every output file into `dir`, keeping file names.
    pub fn redirect_outputs(&mut self, dir: &Path) {
        let mv = |p: &mut PathBuf| {
            if let Some(name) = p.file_name() {
                *p = dir.join(name);
            }
        };
        mv(&mut self.output.metrics);
        if let Some(p) = self.output.graph_dump.as_mut() {
            mv(p);
        }
        if let Some(p) = self.output.snapshot.as_mut() {
            mv(p);
        }
    }
}

/// Reads, parses and validates a config file. Relative paths in the file
/// are taken relative to the file's directory.
pub fn parse_config(path: &Path) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut spec = ExperimentSpec::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
    spec.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(spec)
}
