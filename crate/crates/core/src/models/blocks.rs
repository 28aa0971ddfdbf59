//! Shared encoder blocks: pre-norm single-head attention or token-mixing
//! MLP, each followed by a feedforward, with residual connections.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::rng;

use super::MixerKind;

const LN_EPS: f64 = 1e-5;
const NEG_INF: f64 = -1e9;

#[derive(Clone, Debug)]
pub enum MixParams {
    Attn { wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor },
    Token { w1: Tensor, w2: Tensor },
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub mix: MixParams,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub ff1: Tensor,
    pub ff2: Tensor,
}

impl BlockParams {
    pub fn init(r: &mut ChaCha8Rng, d: usize, n_tokens: usize, mixer: MixerKind) -> BlockParams {
        let lin = |r: &mut ChaCha8Rng, fi: usize, fo: usize| {
            let a = (6.0 / (fi + fo) as f64).sqrt();
            Tensor::new(vec![fi, fo], (0..fi * fo).map(|_| rng::uniform(r, -a, a)).collect())
        };
        let mix = match mixer {
            MixerKind::Attention => MixParams::Attn {
                wq: lin(r, d, d),
                wk: lin(r, d, d),
                wv: lin(r, d, d),
                wo: lin(r, d, d),
            },
            MixerKind::TokenMlp => {
                MixParams::Token { w1: lin(r, n_tokens, n_tokens), w2: lin(r, n_tokens, n_tokens) }
            }
        };
        BlockParams {
            ln1_g: Tensor::filled(vec![d], 1.0),
            ln1_b: Tensor::zeros(vec![d]),
            mix,
            ln2_g: Tensor::filled(vec![d], 1.0),
            ln2_b: Tensor::zeros(vec![d]),
            ff1: lin(r, d, 2 * d),
            ff2: lin(r, 2 * d, d),
        }
    }

    pub fn map(&self, f: &mut impl FnMut(&Tensor) -> Tensor) -> BlockParams {
        BlockParams {
            ln1_g: f(&self.ln1_g),
            ln1_b: f(&self.ln1_b),
            mix: match &self.mix {
                MixParams::Attn { wq, wk, wv, wo } => {
                    MixParams::Attn { wq: f(wq), wk: f(wk), wv: f(wv), wo: f(wo) }
                }
                MixParams::Token { w1, w2 } => MixParams::Token { w1: f(w1), w2: f(w2) },
            },
            ln2_g: f(&self.ln2_g),
            ln2_b: f(&self.ln2_b),
            ff1: f(&self.ff1),
            ff2: f(&self.ff2),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.ln1_g"), &self.ln1_g));
        out.push((format!("{prefix}.ln1_b"), &self.ln1_b));
        match &self.mix {
            MixParams::Attn { wq, wk, wv, wo } => {
                out.push((format!("{prefix}.wq"), wq));
                out.push((format!("{prefix}.wk"), wk));
                out.push((format!("{prefix}.wv"), wv));
                out.push((format!("{prefix}.wo"), wo));
            }
            MixParams::Token { w1, w2 } => {
                out.push((format!("{prefix}.tok_w1"), w1));
                out.push((format!("{prefix}.tok_w2"), w2));
            }
        }
        out.push((format!("{prefix}.ln2_g"), &self.ln2_g));
        out.push((format!("{prefix}.ln2_b"), &self.ln2_b));
        out.push((format!("{prefix}.ff1"), &self.ff1));
        out.push((format!("{prefix}.ff2"), &self.ff2));
    }
}

pub fn layer_norm_1d(tape: &mut Tape, x: &Tensor, g: &Tensor, b: &Tensor) -> Tensor {
    tape.layer_norm(x, g, b, LN_EPS)
}

pub fn block_forward(tape: &mut Tape, p: &BlockParams, x: &Tensor, causal: bool) -> Tensor {
    let h = layer_norm_1d(tape, x, &p.ln1_g, &p.ln1_b);
    let mixed = match &p.mix {
        MixParams::Attn { wq, wk, wv, wo } => attention(tape, &h, wq, wk, wv, wo, causal),
        MixParams::Token { w1, w2 } => token_mix(tape, &h, w1, w2),
    };
    let x = tape.add(x, &mixed);
    let h2 = layer_norm_1d(tape, &x, &p.ln2_g, &p.ln2_b);
    let f = tape.matmul(&h2, &p.ff1);
    let f = tape.gelu(&f);
    let f = tape.matmul(&f, &p.ff2);
    tape.add(&x, &f)
}

fn attention(
    tape: &mut Tape,
    h: &Tensor,
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    wo: &Tensor,
    causal: bool,
) -> Tensor {
    let d = h.shape()[1];
    let n = h.shape()[0];
    let q = tape.matmul(h, wq);
    let k = tape.matmul(h, wk);
    let v = tape.matmul(h, wv);
    let kt = tape.transpose(&k);
    let scores = tape.matmul(&q, &kt);
    let mut scores = tape.scale(&scores, 1.0 / (d as f64).sqrt());
    if causal {
        scores = tape.add(&scores, &causal_mask(n));
    }
    let attn = tape.softmax_rows(&scores);
    let ctx = tape.matmul(&attn, &v);
    tape.matmul(&ctx, wo)
}

/// Additive mask: 0 on and below the diagonal, a large negative number
/// strictly above it.
fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for r in 0..n {
        for c in (r + 1)..n {
            data[r * n + c] = NEG_INF;
        }
    }
    Tensor::new(vec![n, n], data)
}

/// Token-mixing MLP: transpose, mix across the token axis, transpose back.
fn token_mix(tape: &mut Tape, h: &Tensor, w1: &Tensor, w2: &Tensor) -> Tensor {
    let ht = tape.transpose(h);
    let u = tape.matmul(&ht, w1);
    let u = tape.gelu(&u);
    let u = tape.matmul(&u, w2);
    tape.transpose(&u)
}
