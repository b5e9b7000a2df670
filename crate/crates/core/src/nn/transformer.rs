use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Matrix, ParamId, ParamStore, Tape, Var};

/// Trainable weights of a linear map `x · w + b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: store.add_glorot(format!("{name}.weight"), input, output, rng),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, output)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.affine(x, w, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, dim)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}

/// Inverted dropout driven by a seeded generator. `None` means inference.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

fn apply_dropout(tape: &mut Tape, x: Var, dropout: &mut Option<Dropout>) -> Var {
    match dropout {
        Some(d) if d.rate > 0.0 => {
            let (rows, cols) = tape.value(x).shape();
            let keep = 1.0 - d.rate;
            let mask = (0..rows * cols)
                .map(|_| if d.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            tape.mul_const(x, Matrix::from_vec(rows, cols, mask))
        }
        _ => x,
    }
}

/// Pre-norm transformer encoder layer: self-attention then a GELU feed-forward
/// block, each wrapped in a residual connection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerLayer {
    pub dim: usize,
    pub heads: usize,
    pub norm_attn: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl TransformerLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim must be divisible by heads");
        Self {
            dim,
            heads,
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), dim),
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            norm_ff: LayerNorm::new(store, &format!("{name}.norm_ff"), dim),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), dim, ff_dim, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), ff_dim, dim, rng),
        }
    }

    /// Multi-head self-attention over the rows of `x` (already normalized).
    pub fn attention(&self, tape: &mut Tape, x: Var) -> Var {
        let q = self.query.forward(tape, x);
        let k = self.key.forward(tape, x);
        let v = self.value.forward(tape, x);
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let heads: Vec<Var> = (0..self.heads)
            .map(|h| {
                let start = h * head_dim;
                let (qh, kh, vh) = if self.heads == 1 {
                    (q, k, v)
                } else {
                    (
                        tape.col_slice(q, start, head_dim),
                        tape.col_slice(k, start, head_dim),
                        tape.col_slice(v, start, head_dim),
                    )
                };
                let scores = tape.matmul_nt(qh, kh);
                let scores = tape.scale(scores, scale);
                let weights = tape.softmax_rows(scores);
                tape.matmul(weights, vh)
            })
            .collect();
        let merged = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
        self.out.forward(tape, merged)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mut dropout: Option<Dropout>) -> Var {
        let h = self.norm_attn.forward(tape, x);
        let a = self.attention(tape, h);
        let a = apply_dropout(tape, a, &mut dropout);
        let x = tape.add(x, a);
        let h = self.norm_ff.forward(tape, x);
        let f = self.ff_in.forward(tape, h);
        let f = tape.gelu(f);
        let f = self.ff_out.forward(tape, f);
        let f = apply_dropout(tape, f, &mut dropout);
        tape.add(x, f)
    }
}

/// Standard sinusoidal positional encoding, `frames × dim`.
pub fn sinusoidal_positions(frames: usize, dim: usize) -> Matrix {
    let mut m = Matrix::zeros(frames, dim);
    for pos in 0..frames {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
            m.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}
