//! Degradation pattern memory: prototype slots retrieved by top-2 cosine
//! similarity, a trajectory autoencoder that supervises them, and gated
//! fusion into the forecast.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{fill_unit, Graph, Mat, ParamId, ParamStore, Var};
use crate::nn::{Dropout, Mlp};

pub const SLOT_MIN_NORM: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub indices: [usize; 2],
    pub alpha: [f64; 2],
    pub h_mem: Vec<f64>,
    pub similarities: Vec<f64>,
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (l2(a), l2(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Indices of the two largest values, ties to the lower index.
pub fn top2(sims: &[f64]) -> [usize; 2] {
    assert!(sims.len() >= 2, "top-2 needs two slots");
    let mut best = [0usize, 1usize];
    if sims[1] > sims[0] {
        best = [1, 0];
    }
    for (k, &s) in sims.iter().enumerate().skip(2) {
        if s > sims[best[0]] {
            best = [k, best[0]];
        } else if s > sims[best[1]] {
            best[1] = k;
        }
    }
    best
}

/// Softmax over two scores.
pub fn pair_softmax(a: f64, b: f64) -> [f64; 2] {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    [ea / (ea + eb), eb / (ea + eb)]
}

pub fn retrieve_top2(q: &[f64], slots: &Mat) -> Result<RetrievalResult> {
    if l2(q) == 0.0 {
        return Err(Error::DegenerateQuery);
    }
    let similarities: Vec<f64> = slots.rows().into_iter().map(|r| cosine(q, &r.to_vec())).collect();
    let indices = top2(&similarities);
    let alpha = pair_softmax(similarities[indices[0]], similarities[indices[1]]);
    let h_mem = (0..slots.ncols())
        .map(|j| alpha[0] * slots[[indices[0], j]] + alpha[1] * slots[[indices[1], j]])
        .collect();
    Ok(RetrievalResult { indices, alpha, h_mem, similarities })
}

/// Mean `1 - cos` over pairs with nonzero norms, and the number skipped.
pub fn alignment_loss(h_mem: &[Vec<f64>], e_traj: &[Vec<f64>]) -> (f64, usize) {
    let mut total = 0.0;
    let mut used = 0;
    for (h, e) in h_mem.iter().zip(e_traj) {
        if l2(h) == 0.0 || l2(e) == 0.0 {
            continue;
        }
        total += 1.0 - cosine(h, e);
        used += 1;
    }
    let skipped = h_mem.len() - used;
    (if used == 0 { 0.0 } else { total / used as f64 }, skipped)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Memory {
    pub slots: ParamId,
    /// flattened `H` to `q_mem`
    pub query: Mlp,
    pub traj_enc: Mlp,
    pub traj_dec: Mlp,
    /// `[H̄; h_mem]` to gate logits
    pub gate: Mlp,
}

/// Retrieval inside a graph.
pub struct Retrieved {
    pub q_mem: Var,
    pub h_mem: Var,
    pub result: RetrievalResult,
}

impl Memory {
    pub fn new<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let d = cfg.d;
        Memory {
            slots: store.unit_rows("mem.slots", cfg.n_mem, d, rng),
            query: Mlp::new(store, "mem.query", &[cfg.n_queries * d, cfg.d_ff, d], rng),
            traj_enc: Mlp::new(store, "mem.traj_enc", &[cfg.t_max, cfg.d_ffs, cfg.d_ffs, d], rng),
            traj_dec: Mlp::new(store, "mem.traj_dec", &[d, cfg.d_ffs, cfg.d_ffs, cfg.t_max], rng),
            gate: Mlp::new(store, "mem.gate", &[2 * d, cfg.d_ff, d], rng),
        }
    }

    /// `q_mem [1×d]` from `H [s̄×d]`.
    pub fn query(&self, g: &mut Graph, h: Var, drop: &mut Dropout) -> Var {
        let (r, c) = g.shape(h);
        let flat = g.reshape(h, 1, r * c);
        self.query.forward(g, flat, drop)
    }

    pub fn retrieve(&self, g: &mut Graph, q_mem: Var) -> Result<Retrieved> {
        let q: Vec<f64> = g.value(q_mem).iter().copied().collect();
        let slots = g.param(self.slots);
        let result = retrieve_top2(&q, g.value(slots))?;
        let sims = g.cosine_rows(q_mem, slots);
        let picked = g.select_cols(sims, &result.indices);
        let alpha = g.softmax_rows(picked, None);
        let rows = g.select_rows(slots, &result.indices);
        let h_mem = g.matmul(alpha, rows);
        Ok(Retrieved { q_mem, h_mem, result })
    }

    /// `e_trajectory [1×d]` of a masked trajectory `[1×T_max]`.
    pub fn encode_trajectory(&self, g: &mut Graph, y_masked: Var, drop: &mut Dropout) -> Var {
        self.traj_enc.forward(g, y_masked, drop)
    }

    pub fn decode_trajectory(&self, g: &mut Graph, e: Var, drop: &mut Dropout) -> Var {
        self.traj_dec.forward(g, e, drop)
    }

    /// `(H̄ + β ⊙ h_mem, β)`
    pub fn fuse(&self, g: &mut Graph, h_bar: Var, h_mem: Var, drop: &mut Dropout) -> (Var, Var) {
        let cat = g.concat_cols(&[h_bar, h_mem]);
        let logits = self.gate.forward(g, cat, drop);
        let beta = g.sigmoid(logits);
        let gated = g.mul(beta, h_mem);
        (g.add(h_bar, gated), beta)
    }

    /// Redraw any slot whose norm collapsed.
    pub fn repair_slots(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> usize {
        let slots = store.get_mut(self.slots);
        let mut fixed = 0;
        for mut row in slots.rows_mut() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n >= SLOT_MIN_NORM) {
                fill_unit(row.as_slice_mut().expect("standard layout"), rng);
                fixed += 1;
            }
        }
        fixed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn top2_examples() {
        assert_eq!(top2(&[0.9, 0.1, 0.9, 0.5]), [0, 2]);
        let a = pair_softmax(0.9, 0.9);
        assert_eq!(a, [0.5, 0.5]);
        let s = [1.0, 0.0, -0.5, -1.0];
        let i = top2(&s);
        assert_eq!(i, [0, 1]);
        let a = pair_softmax(s[i[0]], s[i[1]]);
        let e = std::f64::consts::E;
        assert!((a[0] - e / (e + 1.0)).abs() < 1e-12 && (a[0] - 0.7311).abs() < 1e-4);
        assert!((a[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn parallel_query_selects_slot() {
        let mut slots = Mat::zeros((3, 3));
        slots[[0, 0]] = 2.0;
        slots[[1, 1]] = 1.0;
        slots[[2, 2]] = 1.0;
        let r = retrieve_top2(&[0.5, 0.0, 0.0], &slots).unwrap();
        assert_eq!(r.indices[0], 0);
        assert_eq!(r.similarities[0], 1.0);
        assert!(matches!(retrieve_top2(&[0.0; 3], &slots), Err(Error::DegenerateQuery)));
    }

    #[test]
    fn alignment_bounds() {
        let a = vec![vec![1.0, 0.0]];
        assert_eq!(alignment_loss(&a, &a), (0.0, 0));
        assert_eq!(alignment_loss(&a, &[vec![-2.0, 0.0]]), (2.0, 0));
        assert_eq!(alignment_loss(&a, &[vec![0.0, 3.0]]), (1.0, 0));
        assert_eq!(alignment_loss(&a, &[vec![0.0, 0.0]]), (0.0, 1));
    }

    #[test]
    fn graph_retrieval_matches_plain() {
        let cfg = ModelConfig { d: 6, n_mem: 5, ..ModelConfig::desk() };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mem = Memory::new(&cfg, &mut store, &mut rng);
        let mut g = Graph::new(&store);
        let q = g.constant(Mat::from_shape_fn((1, 6), |(_, j)| j as f64 - 2.5));
        let r = mem.retrieve(&mut g, q).unwrap();
        let h: Vec<f64> = g.value(r.h_mem).iter().copied().collect();
        for (a, b) in h.iter().zip(&r.result.h_mem) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((r.result.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gate_with_zero_memory() {
        let cfg = ModelConfig { d: 4, ..ModelConfig::desk() };
        let mut store = ParamStore::new();
        let mem = Memory::new(&cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new(&store);
        let hb = g.constant(Mat::from_elem((1, 4), 0.3));
        let z = g.constant(Mat::zeros((1, 4)));
        let (f, beta) = mem.fuse(&mut g, hb, z, &mut Dropout::off());
        assert_eq!(g.value(f), g.value(hb));
        assert!(g.value(beta).iter().all(|b| *b > 0.0 && *b < 1.0));
    }

    #[test]
    fn collapsed_slot_redrawn() {
        let cfg = ModelConfig { d: 4, n_mem: 3, ..ModelConfig::desk() };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mem = Memory::new(&cfg, &mut store, &mut rng);
        store.get_mut(mem.slots).row_mut(1).fill(0.0);
        assert_eq!(mem.repair_slots(&mut store, &mut rng), 1);
        let n: f64 = store.get(mem.slots).row(1).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
