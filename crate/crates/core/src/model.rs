//! The full forecaster: dual-view encoder, condition-aware decoder, pattern
//! memory and prediction head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::decoder::Decoder;
use crate::embedder::{ConditionInput, Embedder, EmbeddingFile, Vocab};
use crate::encoder::{Encoder, EncoderInput};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, ParamStore, Var};
use crate::memory::{Memory, Retrieved, RetrievalResult};
use crate::nn::{sinusoidal, Dropout, Linear, Mlp};
use crate::preprocess::{ModelInput, ProcessedSample, Target};
use crate::record::AgingCondition;

/// Where `z_ac` comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbedderSource {
    Lookup(Vocab),
    External(EmbeddingFile),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embedder: Option<Embedder>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    /// flattened `H` to `H̄`
    pub summary: Mlp,
    /// `H̄` (or the fused vector) to the `T_max` forecast
    pub head: Linear,
    pub memory: Option<Memory>,
    pub pe: Mat,
}

/// Everything a forward pass needs for one battery, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub battery_id: String,
    pub enc: EncoderInput,
    pub condition: Option<ConditionInput>,
    pub target: Option<PreparedTarget>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTarget {
    pub target: Target,
    pub mask: Vec<f64>,
    /// `y_norm` with unobserved positions zeroed, `[1×T_max]`
    pub masked_y: Mat,
}

impl PreparedTarget {
    pub fn new(target: &Target) -> Self {
        let mask = target.mask_f64();
        let masked_y = Mat::from_shape_fn((1, mask.len()), |(_, j)| target.y_norm[j] * mask[j]);
        PreparedTarget { target: target.clone(), mask, masked_y }
    }

    pub fn observed(&self) -> usize {
        self.target.observed()
    }
}

/// Graph handles of one forward pass.
pub struct Forward {
    pub y_hat: Var,
    pub h: Var,
    pub h_bar: Var,
    pub ehat: Option<Var>,
    pub retrieval: Option<Retrieved>,
    pub beta: Option<Var>,
    pub cross_attention: Vec<Var>,
}

/// Per-sample loss terms; `None` when a term does not apply.
pub struct SampleLoss {
    pub pred: Option<Var>,
    pub align: Option<Var>,
    pub recover: Option<Var>,
}

/// Plain-value forward result.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub y_norm: Vec<f64>,
    pub retrieval: Option<RetrievalResult>,
    pub beta: Option<Vec<f64>>,
    /// final-layer cross-attention per head, `[s̄ × n_tokens]`
    pub cross_attention: Vec<Mat>,
    pub ehat: Option<Mat>,
}

impl Model {
    pub fn new(config: ModelConfig, source: EmbedderSource) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let embedder = if config.uses_condition() {
            Some(match (config.llm_embedder, source) {
                (true, EmbedderSource::External(f)) => Embedder::external(f, config.d_enc)?,
                (false, EmbedderSource::Lookup(v)) => Embedder::lookup(v, config.d_enc, &mut params, &mut rng),
                (false, EmbedderSource::External(_)) => {
                    return Err(Error::Config("lookup embedder selected but an embedding file was given".into()))
                }
                (true, EmbedderSource::Lookup(_)) => {
                    return Err(Error::Config("llm_embedder requires an embedding file".into()))
                }
            })
        } else {
            None
        };
        let encoder = Encoder::new(&config, &mut params, &mut rng);
        let decoder = Decoder::new(&config, &mut params, &mut rng);
        let summary = Mlp::new(&mut params, "head.summary", &[config.n_queries * config.d, config.d_ff, config.d], &mut rng);
        let head = Linear::new(&mut params, "head.out", config.d, config.t_max, &mut rng);
        let memory = config.mdpm.then(|| Memory::new(&config, &mut params, &mut rng));
        let pe = sinusoidal(config.n_tokens(), config.d);
        Ok(Model { config, params, embedder, encoder, decoder, summary, head, memory, pe })
    }

    pub fn vocab(&self) -> Option<&Vocab> {
        match &self.embedder {
            Some(Embedder::Lookup { vocab, .. }) => Some(vocab),
            _ => None,
        }
    }

    pub fn prepare_input(&self, battery_id: &str, input: &ModelInput, condition: &AgingCondition) -> Result<Prepared> {
        let c = &self.config;
        if input.s_max() != c.s_max || input.seq_len() != c.seq_len {
            return Err(Error::DimensionMismatch { expected: c.s_max * c.seq_len, found: input.s_max() * input.seq_len() });
        }
        let condition = match &self.embedder {
            Some(e) => Some(e.resolve(condition)?),
            None => None,
        };
        Ok(Prepared { battery_id: battery_id.into(), enc: EncoderInput::new(input, c), condition, target: None })
    }

    pub fn prepare(&self, sample: &ProcessedSample) -> Result<Prepared> {
        if sample.target.t_max() != self.config.t_max {
            return Err(Error::DimensionMismatch { expected: self.config.t_max, found: sample.target.t_max() });
        }
        let mut p = self.prepare_input(&sample.battery_id, &sample.input, &sample.condition)?;
        p.target = Some(PreparedTarget::new(&sample.target));
        Ok(p)
    }

    pub fn forward<'p>(&'p self, g: &mut Graph<'p>, prep: &'p Prepared, drop: &mut Dropout) -> Result<Forward> {
        let tokens = self.encoder.forward(g, &prep.enc, &self.pe, drop);
        let z_ac = match (&self.embedder, &prep.condition) {
            (Some(e), Some(c)) => Some(e.forward(g, c)),
            _ => None,
        };
        let dec = self.decoder.forward(g, tokens, z_ac, &prep.enc.key_mask, drop)?;
        let (r, c) = g.shape(dec.h);
        let flat = g.reshape(dec.h, 1, r * c);
        let h_bar = self.summary.forward(g, flat, drop);
        let (fused, retrieval, beta) = match &self.memory {
            Some(mem) => {
                let q = mem.query(g, dec.h, drop);
                let ret = mem.retrieve(g, q)?;
                let (f, beta) = mem.fuse(g, h_bar, ret.h_mem, drop);
                (f, Some(ret), Some(beta))
            }
            None => (h_bar, None, None),
        };
        let y_hat = self.head.forward(g, fused);
        Ok(Forward {
            y_hat,
            h: dec.h,
            h_bar,
            ehat: dec.ehat,
            retrieval,
            beta,
            cross_attention: dec.cross_attention,
        })
    }

    /// Loss terms of one sample. `pred` is `None` when nothing is observed.
    pub fn sample_loss<'p>(&'p self, g: &mut Graph<'p>, prep: &'p Prepared, fwd: &Forward, drop: &mut Dropout) -> SampleLoss {
        let t = prep.target.as_ref().expect("prepared with a target");
        if t.observed() == 0 {
            return SampleLoss { pred: None, align: None, recover: None };
        }
        let pred = g.masked_mse(fwd.y_hat, &t.target.y_norm, &t.mask);
        let (align, recover) = match (&self.memory, &fwd.retrieval) {
            (Some(mem), Some(ret)) => {
                let y = g.input(&t.masked_y);
                let e = mem.encode_trajectory(g, y, drop);
                let recon = mem.decode_trajectory(g, e, drop);
                let recover = g.masked_mse(recon, &t.target.y_norm, &t.mask);
                let nonzero = |m: &Mat| m.iter().any(|x| *x != 0.0);
                let align = (nonzero(g.value(ret.h_mem)) && nonzero(g.value(e))).then(|| {
                    let c = g.cosine(ret.h_mem, e);
                    g.affine(c, -1.0, 1.0)
                });
                (align, Some(recover))
            }
            _ => (None, None),
        };
        SampleLoss { pred: Some(pred), align, recover }
    }

    pub fn predict(&self, prep: &Prepared) -> Result<Prediction> {
        let mut g = Graph::new(&self.params);
        let f = self.forward(&mut g, prep, &mut Dropout::off())?;
        Ok(Prediction {
            y_norm: g.value(f.y_hat).iter().copied().collect(),
            retrieval: f.retrieval.map(|r| r.result),
            beta: f.beta.map(|b| g.value(b).iter().copied().collect()),
            cross_attention: f.cross_attention.iter().map(|a| g.value(*a).clone()).collect(),
            ehat: f.ehat.map(|e| g.value(e).clone()),
        })
    }

    /// Decoded prototype curve of memory slot `k`, length `T_max`.
    pub fn prototype(&self, k: usize) -> Option<Vec<f64>> {
        let mem = self.memory.as_ref()?;
        let mut g = Graph::new(&self.params);
        let slots = g.param(mem.slots);
        let row = g.slice_rows(slots, k, 1);
        let y = mem.decode_trajectory(&mut g, row, &mut Dropout::off());
        Some(g.value(y).iter().copied().collect())
    }

    /// Copy parameter values from `other` by name; shapes must match.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Integrity(format!(
                "checkpoint has {} parameter tensors, model has {}",
                other.len(),
                self.params.len()
            )));
        }
        for (i, name) in other.names().iter().enumerate() {
            let id = self
                .params
                .id(name)
                .ok_or_else(|| Error::Integrity(format!("unknown parameter {name}")))?;
            let src = &other.values()[i];
            if src.dim() != self.params.get(id).dim() {
                return Err(Error::Integrity(format!("shape mismatch for {name}")));
            }
            self.params.get_mut(id).assign(src);
        }
        Ok(())
    }
}
