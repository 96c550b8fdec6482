//! Masked-context embeddings.
//!
//! A context embedding is the encoder's vector at the mask position after the target
//! word has been replaced by the mask token. The same function embeds datastore
//! contexts and cloze queries, so a query that reproduces a stored sentence lands on
//! that record's key exactly.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize, MASK_TOKEN};
use crate::error::{Error, Result};

/// Context window (in tokens, each side) of the reference embedder.
pub const REFERENCE_WINDOW: usize = 8;
pub const MIN_REFERENCE_DIM: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Reference,
    Imported,
}

/// Provenance and shape of the embeddings in one datastore.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dim: usize,
    /// Free-form label for the encoder layer the vectors came from, e.g. `hidden-11`.
    pub layer_tag: String,
    pub mask_token: String,
}

impl EmbedderConfig {
    pub fn reference(dim: usize) -> Self {
        Self {
            kind: EmbedderKind::Reference,
            dim,
            layer_tag: format!("reference-w{REFERENCE_WINDOW}"),
            mask_token: "[MASK]".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidArgument(
                "embedding dim must be positive".into(),
            ));
        }
        if self.kind == EmbedderKind::Reference && self.dim < MIN_REFERENCE_DIM {
            return Err(Error::InvalidArgument(format!(
                "reference embedder needs dim >= {MIN_REFERENCE_DIM}, got {}",
                self.dim
            )));
        }
        if self.mask_token.trim().is_empty() {
            return Err(Error::InvalidArgument(
                "mask token must be non-empty".into(),
            ));
        }
        Ok(())
    }

    /// Configs are interchangeable when kind, dim and layer agree.
    pub fn ensure_compatible(&self, other: &EmbedderConfig) -> Result<()> {
        if self.kind != other.kind || self.dim != other.dim || self.layer_tag != other.layer_tag {
            return Err(Error::ConfigMismatch {
                stored: Box::new(self.clone()),
                given: Box::new(other.clone()),
            });
        }
        Ok(())
    }
}

/// Fixed-dimension vector of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbedding(Vec<f32>);

impl ContextEmbedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("empty embedding".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "embedding component {i} is not finite"
            )));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }
}

/// Encoder over already-masked token sequences.
pub trait ContextEmbedder: Send + Sync {
    fn config(&self) -> &EmbedderConfig;

    /// Embed `masked`, whose token at `mask_position` is already the mask token.
    fn embed_masked(&self, masked: &[&str], mask_position: usize) -> Result<ContextEmbedding>;
}

/// Replace the token at `mask_position` with the mask token and embed the result.
///
/// The output never depends on the original token at `mask_position`.
pub fn embed_masked_context(
    embedder: &dyn ContextEmbedder,
    tokens: &[&str],
    mask_position: usize,
) -> Result<ContextEmbedding> {
    if mask_position >= tokens.len() {
        return Err(Error::InvalidArgument(format!(
            "mask position {mask_position} out of range for {} tokens",
            tokens.len()
        )));
    }
    let config = embedder.config();
    let mut masked = tokens.to_vec();
    masked[mask_position] = config.mask_token.as_str();
    let embedding = embedder.embed_masked(&masked, mask_position)?;
    if embedding.dim() != config.dim {
        return Err(Error::DimensionMismatch {
            expected: config.dim,
            found: embedding.dim(),
            context: "embedder output".into(),
        });
    }
    Ok(embedding)
}

/// Position of the single mask token in a query, accepting either the canonical
/// `[mask]` surface or the configured mask token.
pub fn mask_position(tokens: &[&str], config: &EmbedderConfig) -> Result<usize> {
    let configured = normalize(&config.mask_token);
    let mut positions = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == MASK_TOKEN || **t == configured || **t == config.mask_token)
        .map(|(i, _)| i);
    match (positions.next(), positions.next()) {
        (Some(p), None) => Ok(p),
        (None, _) => Err(Error::InvalidQuery("query contains no mask token".into())),
        (Some(_), Some(_)) => Err(Error::InvalidQuery(
            "query contains more than one mask token".into(),
        )),
    }
}

/// Embed a cloze query through the same path as datastore contexts.
pub fn embed_query(embedder: &dyn ContextEmbedder, tokens: &[&str]) -> Result<ContextEmbedding> {
    let position = mask_position(tokens, embedder.config())?;
    embed_masked_context(embedder, tokens, position)
}

/// Deterministic feature-hashing embedder used at desk scale.
#[derive(Debug, Clone)]
pub struct ReferenceEmbedder {
    config: EmbedderConfig,
}

impl ReferenceEmbedder {
    pub fn new(dim: usize) -> Result<Self> {
        Self::with_config(EmbedderConfig::reference(dim))
    }

    pub fn with_config(config: EmbedderConfig) -> Result<Self> {
        if config.kind != EmbedderKind::Reference {
            return Err(Error::InvalidArgument(
                "reference embedder needs a reference config".into(),
            ));
        }
        config.validate()?;
        Ok(Self { config })
    }
}

impl ContextEmbedder for ReferenceEmbedder {
    fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    fn embed_masked(&self, masked: &[&str], mask_position: usize) -> Result<ContextEmbedding> {
        reference_embed(masked, mask_position, self.config.dim)
    }
}

/// Hash each context token within [`REFERENCE_WINDOW`] of the mask together with its
/// signed offset into a coordinate, add `1 / (1 + |offset|)`, then L2-normalize.
///
/// A context with no tokens in the window maps to a fixed unit vector.
pub fn reference_embed(
    masked: &[&str],
    mask_position: usize,
    dim: usize,
) -> Result<ContextEmbedding> {
    if dim < MIN_REFERENCE_DIM {
        return Err(Error::InvalidArgument(format!(
            "reference embedder needs dim >= {MIN_REFERENCE_DIM}, got {dim}"
        )));
    }
    if mask_position >= masked.len() {
        return Err(Error::InvalidArgument(format!(
            "mask position {mask_position} out of range for {} tokens",
            masked.len()
        )));
    }
    let window = REFERENCE_WINDOW as isize;
    let mut acc = vec![0f64; dim];
    for (i, token) in masked.iter().enumerate() {
        let offset = i as isize - mask_position as isize;
        if offset == 0 || offset.abs() > window {
            continue;
        }
        let slot = (feature_hash(token, offset as i8) % dim as u64) as usize;
        acc[slot] += 1.0 / (1.0 + offset.unsigned_abs() as f64);
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        let slot = (feature_hash("", 0) % dim as u64) as usize;
        acc[slot] = 1.0;
    } else {
        acc.iter_mut().for_each(|v| *v /= norm);
    }
    ContextEmbedding::new(acc.into_iter().map(|v| v as f32).collect())
}

/// 64-bit FNV-1a over the token bytes, a separator, and the offset byte.
fn feature_hash(token: &str, offset: i8) -> u64 {
    const OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET_BASIS;
    for b in token.bytes().chain([0xff, offset as u8]) {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Query embeddings produced outside the process, keyed by query id.
///
/// JSON-lines rows of the form `{"query_id": "...", "values": [f32, ...]}`.
#[derive(Debug, Clone)]
pub struct ImportedQueryEmbeddings {
    config: EmbedderConfig,
    table: HashMap<String, ContextEmbedding>,
}

#[derive(Deserialize)]
struct QueryEmbeddingRow {
    query_id: String,
    values: Vec<f32>,
}

impl ImportedQueryEmbeddings {
    pub fn load(path: &Path, config: EmbedderConfig) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut table = HashMap::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: QueryEmbeddingRow = serde_json::from_str(&line)
                .map_err(|e| Error::json(format!("{} line {}", path.display(), n + 1), e))?;
            if row.values.len() != config.dim {
                return Err(Error::DimensionMismatch {
                    expected: config.dim,
                    found: row.values.len(),
                    context: format!("query embedding {:?}", row.query_id),
                });
            }
            let embedding = ContextEmbedding::new(row.values)?;
            if table.insert(row.query_id.clone(), embedding).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate query id {:?} in {}",
                    row.query_id,
                    path.display()
                )));
            }
        }
        Ok(Self { config, table })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    pub fn get(&self, query_id: &str) -> Result<&ContextEmbedding> {
        self.table
            .get(query_id)
            .ok_or_else(|| Error::MissingQuery(query_id.to_string()))
    }
}
