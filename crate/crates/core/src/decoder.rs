//! Condition-aware decoder: learnable queries, query modulation by a
//! projected condition embedding, and a post-norm attention stack.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, ParamStore, Var};
use crate::nn::{Dropout, LayerNorm, Linear, Mlp};

/// `e_ac = z W1 + b1`, `E_hat` row i = `e_ac W2_i + b2_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionPrior {
    pub w1: Linear,
    /// all `s̄` row maps side by side, `[d × s̄·d]`
    pub w2: Linear,
    pub n_queries: usize,
    pub d: usize,
}

impl ConditionPrior {
    pub fn new<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        ConditionPrior {
            w1: Linear::new(store, "dec.prior.w1", cfg.d_enc, cfg.d, rng),
            w2: Linear::new(store, "dec.prior.w2", cfg.d, cfg.n_queries * cfg.d, rng),
            n_queries: cfg.n_queries,
            d: cfg.d,
        }
    }

    /// `(e_ac [1×d], E_hat [s̄×d])`
    pub fn forward(&self, g: &mut Graph, z_ac: Var) -> (Var, Var) {
        let e = self.w1.forward(g, z_ac);
        let flat = self.w2.forward(g, e);
        let ehat = g.reshape(flat, self.n_queries, self.d);
        (e, ehat)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Output and per-head weights `[n_q × n_k]`.
pub struct AttentionOut {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Attention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    /// Multi-head attention with queries `q + ehat`.
    pub fn forward(
        &self,
        g: &mut Graph,
        q: Var,
        kv: Var,
        ehat: Option<Var>,
        key_mask: Option<&[bool]>,
        drop: &mut Dropout,
    ) -> Result<AttentionOut> {
        if key_mask.is_some_and(|m| !m.iter().any(|k| *k)) {
            return Err(Error::AllKeysMasked);
        }
        let qin = match ehat {
            Some(e) => g.add(q, e),
            None => q,
        };
        let qp = self.q.forward(g, qin);
        let kp = self.k.forward(g, kv);
        let vp = self.v.forward(g, kv);
        let d = g.shape(qp).1;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(qp, h * dh, dh);
            let kh = g.slice_cols(kp, h * dh, dh);
            let vh = g.slice_cols(vp, h * dh, dh);
            let kt = g.transpose(kh);
            let sc = g.matmul(qh, kt);
            let sc = g.scale(sc, scale);
            let a = g.softmax_rows(sc, key_mask);
            weights.push(a);
            let a = drop.apply(g, a);
            outs.push(g.matmul(a, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        Ok(AttentionOut { out: self.o.forward(g, cat), weights })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub cross_attn: Attention,
    pub ffn: Mlp,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ln3: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub queries: crate::graph::ParamId,
    pub prior: Option<ConditionPrior>,
    pub layers: Vec<DecoderLayer>,
    pub query_prior: bool,
    pub attention_prior: bool,
}

/// Decoder result for one sample.
pub struct Decoded {
    pub h: Var,
    pub e_ac: Option<Var>,
    pub ehat: Option<Var>,
    /// final layer cross-attention, one `[s̄ × n_tokens]` per head
    pub cross_attention: Vec<Var>,
}

impl Decoder {
    pub fn new<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let d = cfg.d;
        let queries = store.xavier("dec.queries", cfg.n_queries, d, rng);
        let prior = cfg.uses_condition().then(|| ConditionPrior::new(cfg, store, rng));
        let layers = (0..cfg.decoder_layers)
            .map(|l| {
                let n = format!("dec.layer{l}");
                DecoderLayer {
                    self_attn: Attention::new(store, &format!("{n}.self"), d, cfg.heads, rng),
                    cross_attn: Attention::new(store, &format!("{n}.cross"), d, cfg.heads, rng),
                    ffn: Mlp::new(store, &format!("{n}.ffn"), &[d, cfg.d_ff, d], rng),
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), d),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), d),
                    ln3: LayerNorm::new(store, &format!("{n}.ln3"), d),
                }
            })
            .collect();
        Decoder { queries, prior, layers, query_prior: cfg.query_prior(), attention_prior: cfg.attention_prior() }
    }

    /// Run the stack from `x0` over tokens `t`. `ehat` modulates every
    /// attention call when given.
    pub fn decode(
        &self,
        g: &mut Graph,
        x0: Var,
        t: Var,
        ehat: Option<Var>,
        key_mask: &[bool],
        drop: &mut Dropout,
    ) -> Result<(Var, Vec<Var>)> {
        let mut h = x0;
        let mut last = Vec::new();
        for layer in &self.layers {
            let sa = layer.self_attn.forward(g, h, h, ehat, None, drop)?;
            let sa = drop.apply(g, sa.out);
            let r = g.add(h, sa);
            h = layer.ln1.forward(g, r);
            let ca = layer.cross_attn.forward(g, h, t, ehat, Some(key_mask), drop)?;
            last = ca.weights;
            let co = drop.apply(g, ca.out);
            let r = g.add(h, co);
            h = layer.ln2.forward(g, r);
            let f = layer.ffn.forward(g, h, drop);
            let f = drop.apply(g, f);
            let r = g.add(h, f);
            h = layer.ln3.forward(g, r);
        }
        Ok((h, last))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: Var,
        z_ac: Option<Var>,
        key_mask: &[bool],
        drop: &mut Dropout,
    ) -> Result<Decoded> {
        let (e_ac, ehat) = match (&self.prior, z_ac) {
            (Some(p), Some(z)) => {
                let (e, eh) = p.forward(g, z);
                (Some(e), Some(eh))
            }
            _ => (None, None),
        };
        let q = g.param(self.queries);
        let x0 = match ehat.filter(|_| self.query_prior) {
            Some(eh) => g.add(q, eh),
            None => q,
        };
        let att_prior = ehat.filter(|_| self.attention_prior);
        let (h, cross_attention) = self.decode(g, x0, tokens, att_prior, key_mask, drop)?;
        Ok(Decoded { h, e_ac, ehat, cross_attention })
    }
}

/// Zero `E_hat` of the right shape, for reduction checks.
pub fn zero_prior(n_queries: usize, d: usize) -> Mat {
    Mat::zeros((n_queries, d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig { d: 8, heads: 2, n_queries: 3, decoder_layers: 2, d_ff: 8, d_enc: 4, ..ModelConfig::desk() }
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_condition_gives_zero_prior() {
        let c = cfg();
        let mut store = ParamStore::new();
        let dec = Decoder::new(&c, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let p = dec.prior.clone().unwrap();
        let mut g = Graph::new(&store);
        let z = g.constant(Mat::zeros((1, 4)));
        let (_, eh) = p.forward(&mut g, z);
        assert_eq!(g.shape(eh), (3, 8));
        assert!(g.value(eh).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_ehat_is_plain_attention() {
        let c = cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = Decoder::new(&c, &mut store, &mut rng);
        let att = &dec.layers[0].cross_attn;
        let q = rand_mat(&mut rng, 3, 8);
        let kv = rand_mat(&mut rng, 5, 8);
        let mut g = Graph::new(&store);
        let (qv, kvv) = (g.constant(q), g.constant(kv));
        let z = g.constant(zero_prior(3, 8));
        let a = att.forward(&mut g, qv, kvv, Some(z), None, &mut Dropout::off()).unwrap();
        let b = att.forward(&mut g, qv, kvv, None, None, &mut Dropout::off()).unwrap();
        assert_eq!(g.value(a.out), g.value(b.out));
    }

    #[test]
    fn single_key_ignores_query() {
        let c = cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dec = Decoder::new(&c, &mut store, &mut rng);
        let att = &dec.layers[0].cross_attn;
        let kv = rand_mat(&mut rng, 1, 8);
        let mut g = Graph::new(&store);
        let kvv = g.constant(kv.clone());
        let q1 = g.constant(rand_mat(&mut rng, 2, 8));
        let q2 = g.constant(rand_mat(&mut rng, 2, 8));
        let a = att.forward(&mut g, q1, kvv, None, None, &mut Dropout::off()).unwrap();
        let b = att.forward(&mut g, q2, kvv, None, None, &mut Dropout::off()).unwrap();
        let expect = att.o.apply(&store, &att.v.apply(&store, &kv));
        for (x, y) in g.value(a.out).iter().zip(g.value(b.out)) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in g.value(a.out).row(0).iter().zip(expect.row(0)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn masking() {
        let c = cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dec = Decoder::new(&c, &mut store, &mut rng);
        let att = &dec.layers[0].cross_attn;
        let mut g = Graph::new(&store);
        let q = g.constant(rand_mat(&mut rng, 3, 8));
        let kv = g.constant(rand_mat(&mut rng, 4, 8));
        let mask = [true, false, true, false];
        let out = att.forward(&mut g, q, kv, None, Some(&mask), &mut Dropout::off()).unwrap();
        for w in &out.weights {
            for row in g.value(*w).rows() {
                assert_eq!(row[1], 0.0);
                assert_eq!(row[3], 0.0);
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
        let none = [false; 4];
        assert!(matches!(
            att.forward(&mut g, q, kv, None, Some(&none), &mut Dropout::off()),
            Err(Error::AllKeysMasked)
        ));
    }

    #[test]
    fn zero_layers_is_identity() {
        let c = ModelConfig { decoder_layers: 0, ..cfg() };
        let mut store = ParamStore::new();
        let dec = Decoder::new(&c, &mut store, &mut ChaCha8Rng::seed_from_u64(4));
        let mut g = Graph::new(&store);
        let x0 = g.constant(Mat::from_elem((3, 8), 0.1));
        let t = g.constant(Mat::from_elem((5, 8), 0.2));
        let (h, w) = dec.decode(&mut g, x0, t, None, &[true; 5], &mut Dropout::off()).unwrap();
        assert_eq!(h, x0);
        assert!(w.is_empty());
    }

    #[test]
    fn ablation_flags() {
        let mut c = cfg();
        c.acquery = false;
        let mut store = ParamStore::new();
        let dec = Decoder::new(&c, &mut store, &mut ChaCha8Rng::seed_from_u64(5));
        assert!(!dec.query_prior && dec.attention_prior && dec.prior.is_some());
        let c = cfg().with_variant(crate::config::Variant::NoAcDecoder);
        let mut store = ParamStore::new();
        let dec = Decoder::new(&c, &mut store, &mut ChaCha8Rng::seed_from_u64(5));
        assert!(!dec.query_prior && !dec.attention_prior && dec.prior.is_none());
    }
}
