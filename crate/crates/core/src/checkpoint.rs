//! Versioned checkpoint files: config, parameters, embedder state, training
//! history and the split the model was trained on.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::embedder::{Embedder, EmbeddingFile, Vocab};
use crate::error::{Error, Result};
use crate::eval::SplitPlan;
use crate::graph::ParamStore;
use crate::model::{EmbedderSource, Model};
use crate::train::FitReport;

pub const FORMAT: &str = "sohf-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub params: ParamStore,
    pub vocab: Option<Vocab>,
    pub embeddings: Option<EmbeddingFile>,
    pub fit: Option<FitReport>,
    pub split: Option<SplitPlan>,
}

impl Checkpoint {
    pub fn new(model: &Model, fit: Option<FitReport>, split: Option<SplitPlan>) -> Self {
        let (vocab, embeddings) = match &model.embedder {
            Some(Embedder::Lookup { vocab, .. }) => (Some(vocab.clone()), None),
            Some(Embedder::External(f)) => (None, Some(f.clone())),
            None => (None, None),
        };
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            config: model.config.clone(),
            params: model.params.clone(),
            vocab,
            embeddings,
            fit,
            split,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c: Checkpoint = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })?;
        if c.format != FORMAT || c.version != VERSION {
            return Err(Error::Integrity(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                c.format,
                c.version
            )));
        }
        c.params.reindex();
        Ok(c)
    }

    /// Rebuild the model and load the stored parameters.
    pub fn model(&self) -> Result<Model> {
        let source = match (&self.embeddings, &self.vocab) {
            (Some(f), _) => EmbedderSource::External(f.clone()),
            (None, Some(v)) => EmbedderSource::Lookup(v.clone()),
            (None, None) => EmbedderSource::Lookup(Vocab::default()),
        };
        let mut m = Model::new(self.config.clone(), source)?;
        m.load_params(&self.params)?;
        Ok(m)
    }
}
