//! Small building blocks shared by the model components.

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Mat, ParamId, ParamStore, Var};

/// `x W + b`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Linear { w: store.xavier(format!("{name}.w"), d_in, d_out, rng), b: store.zeros(format!("{name}.b"), 1, d_out) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.linear(x, self.w, self.b)
    }

    pub fn apply(&self, params: &ParamStore, x: &Mat) -> Mat {
        x.dot(params.get(self.w)) + params.get(self.b)
    }
}

/// Row normalization with learned gain and shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm { gamma: store.ones(format!("{name}.gamma"), 1, d), beta: store.zeros(format!("{name}.beta"), 1, d) }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        let y = g.mul_row(n, gm);
        g.add_row(y, bt)
    }
}

/// Stack of affine layers with GELU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var, drop: &mut Dropout) -> Var {
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(g, x);
            if i + 1 < self.layers.len() {
                x = g.gelu(x);
                x = drop.apply(g, x);
            }
        }
        x
    }

    pub fn d_out(&self, params: &ParamStore) -> usize {
        params.get(self.layers.last().expect("nonempty").w).ncols()
    }
}

/// Inverted dropout. Inactive when `rng` is `None` or the rate is 0.
pub struct Dropout {
    pub rate: f64,
    pub rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: ChaCha8Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        let Some(rng) = self.rng.as_mut().filter(|_| self.rate > 0.0) else { return x };
        let keep = 1.0 - self.rate;
        let (r, c) = g.shape(x);
        let mask = Mat::from_shape_fn((r, c), |_| {
            let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            if u < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        g.mul_const(x, mask)
    }
}

/// Standard sinusoidal positional encoding `[n × d]`.
pub fn sinusoidal(n: usize, d: usize) -> Mat {
    Mat::from_shape_fn((n, d), |(pos, j)| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
