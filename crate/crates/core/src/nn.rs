//! Linear layers, multi-head (cross-)attention and pre-norm transformer
//! encoder layers built on the tape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

/// `y = act(x W + b)` applied over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.register(
            format!("{name}.weight"),
            Tensor::uniform(&[in_dim, out_dim], bound, rng),
        )?;
        let bias = store.register(format!("{name}.bias"), Tensor::uniform(&[out_dim], bound, rng))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
            activation,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let last = tape.shape(x).last().copied();
        if last != Some(self.in_dim) {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        let y = tape.add_trailing(y, b)?;
        Ok(match self.activation {
            Activation::None => y,
            Activation::Relu => tape.relu(y),
        })
    }
}

/// Output of an attention call; `weights` holds one `[B, Tq, Tk]` node per head.
#[derive(Clone, Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention with `heads` heads of width `d / heads`.
/// No positional information is injected here.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub d_model: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub dropout: f64,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d_model} is not divisible by {heads} heads"
            )));
        }
        let bound = 1.0 / (d_model as f64).sqrt();
        let mut proj = |suffix: &str| {
            store.register(
                format!("{name}.{suffix}"),
                Tensor::uniform(&[d_model, d_model], bound, rng),
            )
        };
        Ok(Self {
            heads,
            d_model,
            w_q: proj("w_q")?,
            w_k: proj("w_k")?,
            w_v: proj("w_v")?,
            w_o: proj("w_o")?,
            dropout,
        })
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    /// Queries from `q_in`, keys and values from `kv_in`. Accepts `[T, d]` or
    /// `[B, T, d]` inputs; key length may differ from query length.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, q_in: Var, kv_in: Var) -> Result<Attended> {
        let sq = tape.shape(q_in).to_vec();
        let skv = tape.shape(kv_in).to_vec();
        let rank_ok = sq.len() == skv.len() && (sq.len() == 2 || sq.len() == 3);
        if !rank_ok
            || sq.last() != Some(&self.d_model)
            || skv.last() != Some(&self.d_model)
            || (sq.len() == 3 && sq[0] != skv[0])
        {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: sq,
                rhs: skv,
            });
        }
        let unbatched = sq.len() == 2;
        let (q_in, kv_in) = if unbatched {
            (
                tape.reshape(q_in, &[1, sq[0], sq[1]])?,
                tape.reshape(kv_in, &[1, skv[0], skv[1]])?,
            )
        } else {
            (q_in, kv_in)
        };

        let wq = tape.param(store, self.w_q);
        let wk = tape.param(store, self.w_k);
        let wv = tape.param(store, self.w_v);
        let wo = tape.param(store, self.w_o);
        let q = tape.matmul(q_in, wq)?;
        let k = tape.matmul(kv_in, wk)?;
        let v = tape.matmul(kv_in, wv)?;

        let dk = self.d_k();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice(q, 2, h * dk, dk)?,
                    tape.slice(k, 2, h * dk, dk)?,
                    tape.slice(v, 2, h * dk, dk)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores)?;
            weights.push(attn);
            let attn = tape.dropout(attn, self.dropout)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_last(&heads)?;
        let mut output = tape.matmul(merged, wo)?;
        if unbatched {
            output = tape.reshape(output, &sq)?;
        }
        Ok(Attended { output, weights })
    }
}

/// Pre-norm encoder layer: `h = x + attn(ln1(x))`, `y = h + ffn(ln2(h))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        ff_factor: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let attention = MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, heads, dropout, rng)?;
        let ln1_gamma = store.register(format!("{name}.ln1.gamma"), Tensor::full(&[d_model], 1.0))?;
        let ln1_beta = store.register(format!("{name}.ln1.beta"), Tensor::zeros(&[d_model]))?;
        let ln2_gamma = store.register(format!("{name}.ln2.gamma"), Tensor::full(&[d_model], 1.0))?;
        let ln2_beta = store.register(format!("{name}.ln2.beta"), Tensor::zeros(&[d_model]))?;
        let hidden = ff_factor * d_model;
        let ff_in = Linear::new(store, &format!("{name}.ff_in"), d_model, hidden, Activation::Relu, rng)?;
        let ff_out = Linear::new(store, &format!("{name}.ff_out"), hidden, d_model, Activation::None, rng)?;
        Ok(Self {
            attention,
            ln1_gamma,
            ln1_beta,
            ln2_gamma,
            ln2_beta,
            ff_in,
            ff_out,
            dropout,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, store, x)?.output)
    }

    pub fn forward_with_weights(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Attended> {
        let g1 = tape.param(store, self.ln1_gamma);
        let b1 = tape.param(store, self.ln1_beta);
        let n1 = tape.layer_norm(x, g1, b1, LAYER_NORM_EPS)?;
        let att = self.attention.forward(tape, store, n1, n1)?;
        let a = tape.dropout(att.output, self.dropout)?;
        let h = tape.add(x, a)?;

        let g2 = tape.param(store, self.ln2_gamma);
        let b2 = tape.param(store, self.ln2_beta);
        let n2 = tape.layer_norm(h, g2, b2, LAYER_NORM_EPS)?;
        let f = self.ff_in.forward(tape, store, n2)?;
        let f = self.ff_out.forward(tape, store, f)?;
        let f = tape.dropout(f, self.dropout)?;
        Ok(Attended {
            output: tape.add(h, f)?,
            weights: att.weights,
        })
    }

    /// Zeroes the attention output projection and the feed-forward output
    /// layer, turning the layer into the identity map.
    pub fn zero_residual_branches(&self, store: &mut ParamStore) -> Result<()> {
        for id in [self.attention.w_o, self.ff_out.weight, self.ff_out.bias] {
            let shape = store.value(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape))?;
        }
        Ok(())
    }
}
