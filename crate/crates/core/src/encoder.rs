//! Dual-view encoder: SOC-view tokens from cross-cycle evolution within each
//! SOC interval, temporal tokens from whole-cycle patches.

use ndarray::{s, Array3, ArrayView2};
use rand::Rng;

use crate::config::ModelConfig;
use crate::graph::{Graph, Mat, ParamStore, Var};
use crate::nn::{Dropout, LayerNorm, Linear, Mlp};
use crate::preprocess::{ModelInput, CHANNELS};

/// Conv patches of every cycle, rows ordered `(interval m, cycle i)`, each
/// row the `P × 4` window flattened position-major.
pub fn soc_patches(x: &Array3<f64>, patch: usize) -> Mat {
    let (s_max, l, c) = x.dim();
    let m = (l - patch) / patch + 1;
    let mut out = Mat::zeros((m * s_max, patch * c));
    for mi in 0..m {
        for i in 0..s_max {
            let win = x.slice(s![i, mi * patch..(mi + 1) * patch, ..]);
            let mut row = out.row_mut(mi * s_max + i);
            for (dst, src) in row.iter_mut().zip(win.iter()) {
                *dst = *src;
            }
        }
    }
    out
}

/// `[S_max × 4L]`, each cycle flattened position-major.
pub fn flatten_cycles(x: &Array3<f64>) -> Mat {
    let (s_max, l, c) = x.dim();
    Mat::from_shape_vec((s_max, l * c), x.iter().copied().collect()).expect("contiguous")
}

/// Per-sample constant inputs of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub patches: Option<Mat>,
    pub flat: Mat,
    pub xf: Mat,
    pub key_mask: Vec<bool>,
}

impl EncoderInput {
    pub fn new(input: &ModelInput, config: &ModelConfig) -> Self {
        let m = if config.socview { config.n_soc_tokens() } else { 0 };
        let mut key_mask = input.cycle_mask.clone();
        key_mask.extend(std::iter::repeat_n(true, m));
        EncoderInput {
            patches: config.socview.then(|| soc_patches(&input.x, config.patch)),
            flat: flatten_cycles(&input.x),
            xf: input.xf.clone(),
            key_mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntraBlock {
    pub ffn: Mlp,
    pub norm: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SocView {
    /// kernel `[4P × d]`
    pub conv: Linear,
    /// shared temporal encoder `S_max·d → d_ff → d`
    pub temporal: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub soc: Option<SocView>,
    pub cycle_patch: Linear,
    pub intra: Vec<IntraBlock>,
    pub descriptors: Linear,
    pub s_max: usize,
    pub d: usize,
}

impl Encoder {
    pub fn new<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let d = cfg.d;
        let soc = cfg.socview.then(|| SocView {
            conv: Linear::new(store, "enc.soc.conv", CHANNELS * cfg.patch, d, rng),
            temporal: Mlp::new(store, "enc.soc.temporal", &[cfg.s_max * d, cfg.d_ff, d], rng),
        });
        let cycle_patch = Linear::new(store, "enc.cyclepatch", CHANNELS * cfg.seq_len, d, rng);
        let intra = (0..cfg.intra_layers)
            .map(|i| IntraBlock {
                ffn: Mlp::new(store, &format!("enc.intra{i}.ffn"), &[d, cfg.d_ff, d], rng),
                norm: LayerNorm::new(store, &format!("enc.intra{i}.ln"), d),
            })
            .collect();
        let descriptors = Linear::new(store, "enc.descriptors", 2, d, rng);
        Encoder { soc, cycle_patch, intra, descriptors, s_max: cfg.s_max, d }
    }

    /// `[M × d]` SOC-view tokens.
    pub fn soc_view<'p>(&self, g: &mut Graph<'p>, patches: &'p Mat, drop: &mut Dropout) -> Var {
        let sv = self.soc.as_ref().expect("SOC view enabled");
        let m = patches.nrows() / self.s_max;
        let p = g.input(patches);
        let z = sv.conv.forward(g, p);
        let z = g.reshape(z, m, self.s_max * self.d);
        let t = sv.temporal.forward(g, z, drop);
        drop.apply(g, t)
    }

    /// Positionwise residual blocks over cycle embeddings.
    pub fn intra_cycle(&self, g: &mut Graph, mut h: Var, drop: &mut Dropout) -> Var {
        for b in &self.intra {
            let f = b.ffn.forward(g, h, drop);
            let f = drop.apply(g, f);
            let r = g.add(h, f);
            h = b.norm.forward(g, r);
        }
        h
    }

    /// `[S_max × d]` temporal tokens with descriptors injected.
    pub fn temporal<'p>(&self, g: &mut Graph<'p>, flat: &'p Mat, xf: &'p Mat, drop: &mut Dropout) -> Var {
        let x = g.input(flat);
        let e = self.cycle_patch.forward(g, x);
        let h = self.intra_cycle(g, e, drop);
        let f = g.input(xf);
        let inj = self.descriptors.forward(g, f);
        g.add(h, inj)
    }

    /// Positioned token sequence `[(S_max + M) × d]`.
    pub fn forward<'p>(&self, g: &mut Graph<'p>, inp: &'p EncoderInput, pe: &'p Mat, drop: &mut Dropout) -> Var {
        let t = self.temporal(g, &inp.flat, &inp.xf, drop);
        let tokens = match (&self.soc, &inp.patches) {
            (Some(_), Some(p)) => {
                let s = self.soc_view(g, p, drop);
                g.concat_rows(&[t, s])
            }
            _ => t,
        };
        let pe = g.input(pe);
        g.add(tokens, pe)
    }

    /// Plain convolution of one cycle `[L × 4]` to `[M × d]`.
    pub fn soc_patchify(&self, params: &ParamStore, cycle: ArrayView2<f64>) -> Mat {
        let sv = self.soc.as_ref().expect("SOC view enabled");
        let x = cycle.to_owned().insert_axis(ndarray::Axis(0));
        let patch = params.get(sv.conv.w).nrows() / CHANNELS;
        sv.conv.apply(params, &soc_patches(&x, patch))
    }

    /// Plain CyclePatch embedding of one cycle `[L × 4]`.
    pub fn cyclepatch_embed(&self, params: &ParamStore, cycle: ArrayView2<f64>) -> Vec<f64> {
        let x = cycle.to_owned().insert_axis(ndarray::Axis(0));
        self.cycle_patch.apply(params, &flatten_cycles(&x)).iter().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d: 8,
            seq_len: 20,
            patch: 5,
            s_max: 4,
            s_cycles: 4,
            heads: 2,
            d_ff: 8,
            intra_layers: 2,
            ..ModelConfig::desk()
        }
    }

    fn build(c: &ModelConfig) -> (Encoder, ParamStore) {
        let mut store = ParamStore::new();
        let enc = Encoder::new(c, &mut store, &mut ChaCha8Rng::seed_from_u64(0));
        (enc, store)
    }

    #[test]
    fn identity_kernel_on_constant_input() {
        let c = cfg();
        let (enc, mut store) = build(&c);
        let sv = enc.soc.clone().unwrap();
        // output channel 0 is the window mean of input channel 0
        let w = store.get_mut(sv.conv.w);
        w.fill(0.0);
        for p in 0..5 {
            w[[p * CHANNELS, 0]] = 0.2;
        }
        let cycle = Mat::from_elem((20, 4), 0.37);
        let out = enc.soc_patchify(&store, cycle.view());
        assert_eq!(out.dim(), (4, 8));
        for m in 0..4 {
            assert!((out[[m, 0]] - 0.37).abs() < 1e-15);
        }
    }

    #[test]
    fn cyclepatch_shape_and_linearity() {
        let c = cfg();
        let (enc, store) = build(&c);
        assert_eq!(store.get(enc.cycle_patch.w).dim(), (80, 8));
        let x = Mat::from_shape_fn((20, 4), |(i, j)| (i * 4 + j) as f64 * 0.01);
        let a = enc.cyclepatch_embed(&store, x.view());
        let b = enc.cyclepatch_embed(&store, (&x * 3.0).view());
        for (u, v) in a.iter().zip(&b) {
            assert!((3.0 * u - v).abs() < 1e-12);
        }
        assert!(enc.cyclepatch_embed(&store, Mat::zeros((20, 4)).view()).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn intra_is_positionwise() {
        let c = cfg();
        let (enc, store) = build(&c);
        let mut g = Graph::new(&store);
        let row: Vec<f64> = (0..8).map(|k| k as f64 - 3.0).collect();
        let m = Mat::from_shape_fn((3, 8), |(i, j)| if i < 2 { row[j] } else { -row[j] * 2.0 });
        let x = g.constant(m);
        let y = enc.intra_cycle(&mut g, x, &mut Dropout::off());
        let v = g.value(y);
        assert_eq!(v.row(0), v.row(1));
        assert!(v.iter().all(|x| x.is_finite()));

        let none = ModelConfig { intra_layers: 0, ..cfg() };
        let (enc0, store0) = build(&none);
        let mut g = Graph::new(&store0);
        let x = g.constant(Mat::from_elem((2, 8), 0.5));
        assert_eq!(enc0.intra_cycle(&mut g, x, &mut Dropout::off()), x);
    }

    #[test]
    fn soc_view_shared_weights() {
        let c = cfg();
        let (enc, store) = build(&c);
        // intervals 0 and 2 hold identical data, interval 1 differs
        let mut x = Array3::zeros((4, 20, 4));
        for i in 0..4 {
            for p in 0..5 {
                for ch in 0..4 {
                    let v = (i + p + ch) as f64 * 0.1;
                    x[[i, p, ch]] = v;
                    x[[i, 10 + p, ch]] = v;
                    x[[i, 5 + p, ch]] = -v;
                }
            }
        }
        let patches = soc_patches(&x, 5);
        let mut g = Graph::new(&store);
        let t = enc.soc_view(&mut g, &patches, &mut Dropout::off());
        let v = g.value(t);
        assert_eq!(v.dim(), (4, 8));
        assert_eq!(v.row(0), v.row(2));
        assert_ne!(v.row(0), v.row(1));
    }

    #[test]
    fn descriptor_injection_is_local() {
        let c = cfg();
        let (enc, store) = build(&c);
        let flat = Mat::from_shape_fn((4, 80), |(i, j)| ((i + j) % 7) as f64 * 0.1);
        let xf = Mat::from_elem((4, 2), 0.9);
        let mut xf2 = xf.clone();
        xf2[[2, 1]] += 0.5;
        let mut g = Graph::new(&store);
        let a = enc.temporal(&mut g, &flat, &xf, &mut Dropout::off());
        let b = enc.temporal(&mut g, &flat, &xf2, &mut Dropout::off());
        let (a, b) = (g.value(a), g.value(b));
        for i in 0..4 {
            assert_eq!(a.row(i) == b.row(i), i != 2);
        }
    }
}
