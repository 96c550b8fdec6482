use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use bknn::ann::IvfConfig;
use bknn::ir::IrQueryConfig;
use bknn::knn::KnnConfig;
use bknn::pipeline::InterpolationConfig;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum StubLm {
    /// Every candidate equally likely
    Uniform,
    /// Unigram and sentence co-occurrence counts from the corpus
    #[default]
    Cooccurrence,
}

/// Project file: artifact paths and model settings. Paths are relative to the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub corpus: Option<PathBuf>,
    pub datastore: Option<PathBuf>,
    pub ir_index: Option<PathBuf>,
    pub ann_index: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    pub lm_predictions: Option<PathBuf>,
    pub query_embeddings: Option<PathBuf>,
    pub stub_lm: StubLm,
    pub knn: KnnConfig,
    pub ir: IrQueryConfig,
    pub interpolation: InterpolationConfig,
    pub ivf: IvfConfig,
}

impl ProjectConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: Self = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut config.corpus,
            &mut config.datastore,
            &mut config.ir_index,
            &mut config.ann_index,
            &mut config.candidates,
            &mut config.lm_predictions,
            &mut config.query_embeddings,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }
}

/// A path the subcommand cannot run without.
pub fn required<'a>(path: &'a Option<PathBuf>, what: &str, flag: &str) -> anyhow::Result<&'a Path> {
    let path = path.as_deref().ok_or_else(|| {
        UsageError(format!(
            "{what} is required: pass {flag} or set it in --config"
        ))
    })?;
    if !path.exists() {
        return Err(UsageError(format!("{what} {} does not exist", path.display())).into());
    }
    Ok(path)
}

pub fn write_output(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}
