//! Aging-condition embeddings: learned factor lookups or a precomputed
//! external embedding file.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mat, ParamId, ParamStore, Var};
use crate::record::AgingCondition;

/// Factors the lookup embedder uses.
pub const LOOKUP_FACTORS: [&str; 5] = [
    "positive electrode",
    "negative electrode",
    "operating temperature",
    "package structure",
    "manufacturer",
];
pub const OOV_BUCKETS: usize = 16;

/// One `factor_name: value` line per field, in canonical order.
pub fn render_prompt(condition: &AgingCondition) -> String {
    condition
        .factors()
        .iter()
        .map(|(k, v)| format!("{k}: {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// 64-bit FNV-1a.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn factor_value(condition: &AgingCondition, factor: &str) -> String {
    condition
        .factors()
        .into_iter()
        .find(|(k, _)| *k == factor)
        .map(|(_, v)| v)
        .expect("known factor")
}

/// Per-factor vocabularies built from training conditions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    /// sorted known values per factor in `LOOKUP_FACTORS` order
    pub values: Vec<Vec<String>>,
}

impl Vocab {
    pub fn build<'a>(conditions: impl IntoIterator<Item = &'a AgingCondition>) -> Self {
        let mut sets: Vec<std::collections::BTreeSet<String>> = vec![Default::default(); LOOKUP_FACTORS.len()];
        for c in conditions {
            for (f, set) in LOOKUP_FACTORS.iter().zip(&mut sets) {
                set.insert(factor_value(c, f));
            }
        }
        Vocab { values: sets.into_iter().map(|s| s.into_iter().collect()).collect() }
    }

    pub fn rows(&self, factor: usize) -> usize {
        self.values[factor].len() + OOV_BUCKETS
    }

    /// Table row for a factor value; unseen values hash into the OOV rows.
    pub fn index(&self, factor: usize, value: &str) -> usize {
        let known = &self.values[factor];
        match known.binary_search_by(|v| v.as_str().cmp(value)) {
            Ok(i) => i,
            Err(_) => known.len() + (stable_hash(value) % OOV_BUCKETS as u64) as usize,
        }
    }

    pub fn indices(&self, condition: &AgingCondition) -> Vec<usize> {
        LOOKUP_FACTORS
            .iter()
            .enumerate()
            .map(|(f, name)| self.index(f, &factor_value(condition, name)))
            .collect()
    }
}

/// Precomputed embeddings keyed by condition key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingFile {
    pub embedder: String,
    pub d_enc: usize,
    pub embeddings: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: EmbeddingFile = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })?;
        f.check()?;
        Ok(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("embeddings serialize");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn check(&self) -> Result<()> {
        for (k, v) in &self.embeddings {
            if v.len() != self.d_enc {
                return Err(Error::DimensionMismatch { expected: self.d_enc, found: v.len() });
            }
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::Integrity(format!("non-finite embedding for {k}")));
            }
        }
        Ok(())
    }

    /// Reject a file whose width differs from the model's.
    pub fn expect_dim(&self, d_enc: usize) -> Result<()> {
        if self.d_enc != d_enc {
            return Err(Error::DimensionMismatch { expected: d_enc, found: self.d_enc });
        }
        Ok(())
    }

    pub fn embed(&self, condition: &AgingCondition) -> Result<&[f64]> {
        let key = condition.key();
        self.embeddings.get(&key).map(|v| v.as_slice()).ok_or(Error::MissingEmbedding(key))
    }
}

/// Signed hashed character-trigram embedding of the rendered prompt,
/// L2-normalized. A self-contained stand-in for an offline text embedder.
pub fn prompt_embedding(condition: &AgingCondition, d_enc: usize) -> Vec<f64> {
    let text: Vec<char> = render_prompt(condition).chars().collect();
    let mut v = vec![0.0; d_enc];
    for w in text.windows(3) {
        let h = stable_hash(&w.iter().collect::<String>());
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % d_enc as u64) as usize] += sign;
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub fn prompt_embedding_file<'a>(conditions: impl IntoIterator<Item = &'a AgingCondition>, d_enc: usize) -> EmbeddingFile {
    EmbeddingFile {
        embedder: "hashed-char-trigram".into(),
        d_enc,
        embeddings: conditions.into_iter().map(|c| (c.key(), prompt_embedding(c, d_enc))).collect(),
    }
}

/// Source of `z_ac`.
#[derive(Debug, Clone, PartialEq)]
pub enum Embedder {
    Lookup { vocab: Vocab, tables: Vec<ParamId> },
    External(EmbeddingFile),
}

/// Per-sample handle resolved ahead of the forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum ConditionInput {
    Rows(Vec<usize>),
    Fixed(Mat),
}

impl Embedder {
    pub fn lookup<R: Rng>(vocab: Vocab, d_enc: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let tables = LOOKUP_FACTORS
            .iter()
            .enumerate()
            .map(|(f, name)| store.xavier(format!("embed.{}", name.replace(' ', "_")), vocab.rows(f), d_enc, rng))
            .collect();
        Embedder::Lookup { vocab, tables }
    }

    pub fn external(file: EmbeddingFile, d_enc: usize) -> Result<Self> {
        file.expect_dim(d_enc)?;
        Ok(Embedder::External(file))
    }

    pub fn resolve(&self, condition: &AgingCondition) -> Result<ConditionInput> {
        Ok(match self {
            Embedder::Lookup { vocab, .. } => ConditionInput::Rows(vocab.indices(condition)),
            Embedder::External(f) => {
                let v = f.embed(condition)?;
                ConditionInput::Fixed(Mat::from_shape_vec((1, v.len()), v.to_vec()).expect("row"))
            }
        })
    }

    /// `z_ac` as a `[1×d_enc]` node.
    pub fn forward<'p>(&self, g: &mut Graph<'p>, input: &'p ConditionInput) -> Var {
        match (self, input) {
            (Embedder::Lookup { tables, .. }, ConditionInput::Rows(rows)) => {
                let mut acc: Option<Var> = None;
                for (t, r) in tables.iter().zip(rows) {
                    let tv = g.param(*t);
                    let row = g.select_rows(tv, &[*r]);
                    acc = Some(match acc {
                        Some(a) => g.add(a, row),
                        None => row,
                    });
                }
                acc.expect("at least one factor")
            }
            (_, ConditionInput::Fixed(m)) => g.input(m),
            _ => panic!("condition input does not match embedder"),
        }
    }

    /// Plain evaluation of `z_ac` without a graph.
    pub fn embed(&self, params: &ParamStore, condition: &AgingCondition) -> Result<Vec<f64>> {
        Ok(match self.resolve(condition)? {
            ConditionInput::Fixed(m) => m.iter().copied().collect(),
            ConditionInput::Rows(rows) => {
                let Embedder::Lookup { tables, .. } = self else { unreachable!() };
                let d = params.get(tables[0]).ncols();
                let mut v = vec![0.0; d];
                for (t, r) in tables.iter().zip(rows) {
                    for (acc, x) in v.iter_mut().zip(params.get(*t).row(r)) {
                        *acc += x;
                    }
                }
                v
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::tests::condition;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prompt_lines() {
        let a = condition("x");
        let p = render_prompt(&a);
        assert_eq!(p.lines().count(), 10);
        assert_eq!(p, render_prompt(&a.clone()));
        let mut b = a.clone();
        b.operating_temperature = 45.0;
        let q = render_prompt(&b);
        let diff: Vec<_> = p.lines().zip(q.lines()).filter(|(x, y)| x != y).collect();
        assert_eq!(diff.len(), 1);
        assert!(diff[0].0.starts_with("operating temperature: "));
    }

    #[test]
    fn lookup_and_oov() {
        let a = condition("x");
        let vocab = Vocab::build([&a]);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb = Embedder::lookup(vocab, 6, &mut store, &mut rng);
        assert_eq!(emb.embed(&store, &a).unwrap(), emb.embed(&store, &a.clone()).unwrap());
        let mut unseen = a.clone();
        unseen.manufacturer = "never-seen".into();
        let v1 = emb.embed(&store, &unseen).unwrap();
        assert_eq!(v1, emb.embed(&store, &unseen).unwrap());
        assert_ne!(v1, emb.embed(&store, &a).unwrap());
        for m in store.values_mut() {
            m.fill(0.0);
        }
        assert!(emb.embed(&store, &unseen).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn graph_matches_plain() {
        let a = condition("x");
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb = Embedder::lookup(Vocab::build([&a]), 4, &mut store, &mut rng);
        let input = emb.resolve(&a).unwrap();
        let mut g = Graph::new(&store);
        let z = emb.forward(&mut g, &input);
        let plain = emb.embed(&store, &a).unwrap();
        assert_eq!(g.value(z).iter().copied().collect::<Vec<_>>(), plain);
    }

    #[test]
    fn external_file() {
        let a = condition("x");
        let file = prompt_embedding_file([&a], 8);
        let emb = Embedder::external(file.clone(), 8).unwrap();
        let store = ParamStore::new();
        assert_eq!(emb.embed(&store, &a).unwrap(), file.embeddings[&a.key()]);
        assert!(matches!(emb.embed(&store, &condition("y")), Err(Error::MissingEmbedding(_))));
        assert!(matches!(Embedder::external(file, 16), Err(Error::DimensionMismatch { .. })));
        let mut bad = prompt_embedding_file([&a], 8);
        bad.embeddings.get_mut(&a.key()).unwrap().pop();
        assert!(matches!(bad.check(), Err(Error::DimensionMismatch { .. })));
    }
}
