//! Text-guided progressive fusion: interleaved core enhancement units (CEU)
//! and minor fusion units (MFU), the final cross-modal fusion, the prediction
//! head and the training losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, EncoderLayer, Linear, MultiHeadAttention};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Minor fusion unit: `FC(h_m + α·CMA(h_t, h0_a) + β·CMA(h_t, h0_v))`.
#[derive(Clone, Debug)]
pub struct MfuLayer {
    pub text_to_audio: MultiHeadAttention,
    pub text_to_visual: MultiHeadAttention,
    pub alpha: ParamId,
    pub beta: ParamId,
    pub post: Linear,
}

impl MfuLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let text_to_audio = MultiHeadAttention::new(store, &format!("{name}.t2a"), d_model, heads, dropout, rng)?;
        let text_to_visual = MultiHeadAttention::new(store, &format!("{name}.t2v"), d_model, heads, dropout, rng)?;
        let alpha = store.register(format!("{name}.alpha"), Tensor::full(&[1], 1.0))?;
        let beta = store.register(format!("{name}.beta"), Tensor::full(&[1], 1.0))?;
        let post = Linear::new(store, &format!("{name}.post"), d_model, d_model, Activation::None, rng)?;
        let mut w = Tensor::randn(&[d_model, d_model], 0.02, rng);
        for i in 0..d_model {
            w.data_mut()[i * d_model + i] += 1.0;
        }
        store.set(post.weight, w)?;
        store.set(post.bias, Tensor::zeros(&[d_model]))?;
        Ok(Self {
            text_to_audio,
            text_to_visual,
            alpha,
            beta,
            post,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h_t: Var,
        h0_a: Var,
        h0_v: Var,
        h_m_prev: Var,
    ) -> Result<Var> {
        let want = tape.shape(h_m_prev).to_vec();
        for v in [h_t, h0_a, h0_v] {
            if tape.shape(v) != want.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "mfu",
                    lhs: want,
                    rhs: tape.shape(v).to_vec(),
                });
            }
        }
        let to_a = self.text_to_audio.forward(tape, store, h_t, h0_a)?.output;
        let to_v = self.text_to_visual.forward(tape, store, h_t, h0_v)?.output;
        let alpha = tape.param(store, self.alpha);
        let beta = tape.param(store, self.beta);
        let to_a = tape.mul_scalar(to_a, alpha)?;
        let to_v = tape.mul_scalar(to_v, beta)?;
        let sum = tape.add(h_m_prev, to_a)?;
        let sum = tape.add(sum, to_v)?;
        self.post.forward(tape, store, sum)
    }
}

/// Sizes of a fusion stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StackDims {
    pub d_model: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub ceu_layers: usize,
    pub mfu_layers: usize,
    pub dropout: f64,
}

/// `J` CEUs, `K = J + 1` MFUs and the learnable initial minor state.
#[derive(Clone, Debug)]
pub struct TpfStack {
    pub ceu: Vec<EncoderLayer>,
    pub mfu: Vec<MfuLayer>,
    pub h0_m: ParamId,
    pub dims: StackDims,
}

impl TpfStack {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: StackDims, rng: &mut R) -> Result<Self> {
        if dims.mfu_layers != dims.ceu_layers + 1 {
            return Err(Error::Config(format!(
                "fusion stack needs K = J + 1, got J = {} and K = {}",
                dims.ceu_layers, dims.mfu_layers
            )));
        }
        let d = dims.d_model;
        let ceu = (1..=dims.ceu_layers)
            .map(|j| EncoderLayer::new(store, &format!("{name}.ceu{j}"), d, dims.heads, 4, dims.dropout, rng))
            .collect::<Result<Vec<_>>>()?;
        let mfu = (1..=dims.mfu_layers)
            .map(|k| MfuLayer::new(store, &format!("{name}.mfu{k}"), d, dims.heads, dims.dropout, rng))
            .collect::<Result<Vec<_>>>()?;
        let h0_m = store.register(format!("{name}.h0_m"), Tensor::randn(&[dims.seq_len, d], 0.02, rng))?;
        Ok(Self { ceu, mfu, h0_m, dims })
    }

    /// Runs CEU `j` (1-based).
    pub fn ceu_forward(&self, tape: &mut Tape, store: &ParamStore, h_t: Var, j: usize) -> Result<Var> {
        if j == 0 || j > self.ceu.len() {
            return Err(Error::InvalidArgument(format!(
                "CEU index {j} outside 1..={}",
                self.ceu.len()
            )));
        }
        self.ceu[j - 1].forward(tape, store, h_t)
    }

    /// Initial minor state shaped like `like` (`[T, d]` or `[B, T, d]`).
    pub fn initial_minor(&self, tape: &mut Tape, store: &ParamStore, like: Var) -> Result<Var> {
        let h = tape.param(store, self.h0_m);
        let shape = tape.shape(like).to_vec();
        match shape.len() {
            2 => Ok(h),
            3 => tape.broadcast_leading(h, shape[0]),
            _ => Err(Error::InvalidShape {
                shape,
                reason: "fusion expects [T, d] or [B, T, d]".into(),
            }),
        }
    }

    /// Returns `(H^J_t, H^K_m)`. MFU `k` reads the core feature after `k - 1` CEUs.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h0_t: Var, h0_a: Var, h0_v: Var) -> Result<(Var, Var)> {
        let mut h_m = self.initial_minor(tape, store, h0_t)?;
        let mut h_t = h0_t;
        for (k, mfu) in self.mfu.iter().enumerate() {
            h_m = mfu.forward(tape, store, h_t, h0_a, h0_v, h_m)?;
            if k < self.ceu.len() {
                h_t = self.ceu[k].forward(tape, store, h_t)?;
            }
        }
        Ok((h_t, h_m))
    }

    /// Variant without core guidance: every MFU reads `H⁰_t` and the CEUs run
    /// as a plain encoder stack.
    pub fn forward_unguided(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h0_t: Var,
        h0_a: Var,
        h0_v: Var,
    ) -> Result<(Var, Var)> {
        let mut h_m = self.initial_minor(tape, store, h0_t)?;
        for mfu in &self.mfu {
            h_m = mfu.forward(tape, store, h0_t, h0_a, h0_v, h_m)?;
        }
        let mut h_t = h0_t;
        for layer in &self.ceu {
            h_t = layer.forward(tape, store, h_t)?;
        }
        Ok((h_t, h_m))
    }
}

/// Cross-attention with the core feature as query and the minor state as key and value.
pub fn ultimate_fusion(tape: &mut Tape, store: &ParamStore, block: &MultiHeadAttention, h_t: Var, h_m: Var) -> Result<Var> {
    Ok(block.forward(tape, store, h_t, h_m)?.output)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Regression,
    Classification { classes: usize },
}

impl Task {
    pub fn outputs(self) -> usize {
        match self {
            Task::Regression => 1,
            Task::Classification { classes } => classes,
        }
    }
}

/// Mean over the sequence axis followed by a linear map.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub fc: Linear,
    pub task: Task,
}

impl PredictionHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_model: usize, task: Task, rng: &mut R) -> Result<Self> {
        if task.outputs() == 0 {
            return Err(Error::Config("classification needs at least one class".into()));
        }
        let fc = Linear::new(store, name, d_model, task.outputs(), Activation::None, rng)?;
        Ok(Self { fc, task })
    }

    /// `[T, d]` gives `[1]` (or `[1, C]`); `[B, T, d]` gives `[B]` (or `[B, C]`).
    pub fn predict(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let shape = tape.shape(h).to_vec();
        let h = match shape.len() {
            2 => tape.reshape(h, &[1, shape[0], shape[1]])?,
            3 => h,
            _ => {
                return Err(Error::InvalidShape {
                    shape,
                    reason: "prediction head expects [T, d] or [B, T, d]".into(),
                })
            }
        };
        let pooled = tape.reduce_mean(h, 1)?;
        let out = self.fc.forward(tape, store, pooled)?;
        match self.task {
            Task::Regression => {
                let b = tape.shape(out)[0];
                tape.reshape(out, &[b])
            }
            Task::Classification { .. } => Ok(out),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    Mae,
    Mse,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Real(Vec<f64>),
    Class(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Real(v) => v.len(),
            Targets::Class(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Batch-mean loss of `preds` (`[B]` for real targets, `[B, C]` logits for classes).
pub fn compute_loss(tape: &mut Tape, preds: Var, targets: &Targets, mode: LossMode) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("loss over an empty batch".into()));
    }
    match (mode, targets) {
        (LossMode::Mae | LossMode::Mse, Targets::Real(y)) => {
            if tape.shape(preds) != [y.len()] {
                return Err(Error::ShapeMismatch {
                    op: "loss",
                    lhs: tape.shape(preds).to_vec(),
                    rhs: vec![y.len()],
                });
            }
            let y = tape.constant(Tensor::new(vec![y.len()], y.clone())?);
            let diff = tape.sub(preds, y)?;
            let err = if mode == LossMode::Mae {
                tape.abs(diff)
            } else {
                tape.square(diff)
            };
            Ok(tape.mean_all(err))
        }
        (LossMode::CrossEntropy, Targets::Class(c)) => tape.cross_entropy(preds, c),
        _ => Err(Error::InvalidArgument(format!(
            "loss mode {mode:?} does not match the target type"
        ))),
    }
}
