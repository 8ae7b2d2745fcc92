//! The full network: unimodal coding, description encoding, enhancement,
//! progressive fusion and the prediction head, with switches for every
//! ablation variant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{unify, FeatureEnhancer, TextEmbedding, TokenBank, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{Activation, EncoderLayer, Linear, MultiHeadAttention};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::tpf::{ultimate_fusion, PredictionHead, StackDims, Task, TpfStack};

/// Width multiplier of every feed-forward block.
pub const FF_FACTOR: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Rows `T` of every unified feature.
    pub seq_len: usize,
    pub heads: usize,
    pub ceu_layers: usize,
    pub mfu_layers: usize,
    pub vocab_size: usize,
    pub text_len: usize,
    pub desc_len: usize,
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub audio_len: usize,
    pub visual_len: usize,
    pub dropout: f64,
    pub task: Task,
    pub use_aed: bool,
    pub use_ved: bool,
    pub use_raw_av: bool,
    pub use_ceu: bool,
    pub use_mfu: bool,
    pub use_fusion_layer: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            seq_len: 8,
            heads: 4,
            ceu_layers: 2,
            mfu_layers: 3,
            vocab_size: 512,
            text_len: 16,
            desc_len: 24,
            audio_dim: 8,
            visual_dim: 16,
            audio_len: 20,
            visual_len: 20,
            dropout: 0.1,
            task: Task::Regression,
            use_aed: true,
            use_ved: true,
            use_raw_av: true,
            use_ceu: true,
            use_mfu: true,
            use_fusion_layer: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("seq_len", self.seq_len),
            ("heads", self.heads),
            ("text_len", self.text_len),
            ("desc_len", self.desc_len),
            ("audio_dim", self.audio_dim),
            ("visual_dim", self.visual_dim),
            ("audio_len", self.audio_len),
            ("visual_len", self.visual_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.mfu_layers != self.ceu_layers + 1 {
            return Err(Error::Config(format!(
                "mfu_layers must equal ceu_layers + 1 (got J = {}, K = {})",
                self.ceu_layers, self.mfu_layers
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must hold <pad> and <unk>".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !self.use_raw_av && !self.use_aed {
            return Err(Error::Config("audio path has neither raw features nor descriptions".into()));
        }
        if !self.use_raw_av && !self.use_ved {
            return Err(Error::Config("visual path has neither raw features nor descriptions".into()));
        }
        Ok(())
    }

    fn text_parts(&self) -> usize {
        1 + self.use_aed as usize + self.use_ved as usize
    }

    fn audio_parts(&self) -> usize {
        self.use_raw_av as usize + self.use_aed as usize
    }

    fn visual_parts(&self) -> usize {
        self.use_raw_av as usize + self.use_ved as usize
    }
}

/// One utterance ready for batching: token ids padded to the configured
/// lengths and raw frames padded or truncated to fixed lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub text: Vec<usize>,
    pub aed: Vec<usize>,
    pub ved: Vec<usize>,
    /// Row-major `audio_len x audio_dim`.
    pub audio: Vec<f64>,
    /// Row-major `visual_len x visual_dim`.
    pub visual: Vec<f64>,
}

fn fit_frames(frames: &[Vec<f64>], len: usize, dim: usize, what: &str) -> Result<Vec<f64>> {
    let mut out = vec![0.0; len * dim];
    for (i, f) in frames.iter().take(len).enumerate() {
        if f.len() != dim {
            return Err(Error::Data(format!(
                "{what} frame {i} has width {}, expected {dim}",
                f.len()
            )));
        }
        out[i * dim..(i + 1) * dim].copy_from_slice(f);
    }
    Ok(out)
}

impl EncodedSample {
    pub fn new(
        config: &ModelConfig,
        vocab: &Vocabulary,
        text: &str,
        aed: &str,
        ved: &str,
        audio: &[Vec<f64>],
        visual: &[Vec<f64>],
    ) -> Result<Self> {
        if audio.is_empty() || visual.is_empty() {
            return Err(Error::Data("utterance has an empty audio or visual sequence".into()));
        }
        Ok(Self {
            text: vocab.encode(text, config.text_len)?,
            aed: vocab.encode(aed, config.desc_len)?,
            ved: vocab.encode(ved, config.desc_len)?,
            audio: fit_frames(audio, config.audio_len, config.audio_dim, "audio")?,
            visual: fit_frames(visual, config.visual_len, config.visual_dim, "visual")?,
        })
    }
}

#[derive(Clone, Debug)]
enum Core {
    Tpf(TpfStack),
    /// Encoder stack on the core path and `H⁰_a + H⁰_v` as the minor state.
    Additive(Vec<EncoderLayer>),
}

#[derive(Clone, Debug)]
enum Fusion {
    Attention(MultiHeadAttention),
    Concat(Linear),
}

#[derive(Clone, Debug)]
struct RawPath {
    proj: Linear,
    layer: EncoderLayer,
}

/// Intermediate features of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Trace {
    pub h0_t: Var,
    pub h0_a: Var,
    pub h0_v: Var,
    pub h_t: Var,
    pub h_m: Var,
    pub fused: Var,
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct Deva {
    pub config: ModelConfig,
    embedding: TextEmbedding,
    text_layer: EncoderLayer,
    bank_t: TokenBank,
    bank_a: TokenBank,
    bank_v: TokenBank,
    audio: Option<RawPath>,
    visual: Option<RawPath>,
    enhance_t: FeatureEnhancer,
    enhance_a: FeatureEnhancer,
    enhance_v: FeatureEnhancer,
    core: Core,
    fusion: Fusion,
    head: PredictionHead,
}

impl Deva {
    /// Registers every parameter in `store`, initialized from `seed`.
    pub fn new(config: ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let (d, t, heads, p) = (c.d_model, c.seq_len, c.heads, c.dropout);
        let embedding = TextEmbedding::new(store, "text.embedding", c.vocab_size, d, rng)?;
        let text_layer = EncoderLayer::new(store, "text.encoder", d, heads, FF_FACTOR, p, rng)?;
        let bank_t = TokenBank::new(store, "bank.text", t, d, rng)?;
        let bank_a = TokenBank::new(store, "bank.audio", t, d, rng)?;
        let bank_v = TokenBank::new(store, "bank.visual", t, d, rng)?;
        let mut raw = |name: &str, dim: usize| -> Result<Option<RawPath>> {
            if !c.use_raw_av {
                return Ok(None);
            }
            Ok(Some(RawPath {
                proj: Linear::new(store, &format!("{name}.proj"), dim, d, Activation::None, rng)?,
                layer: EncoderLayer::new(store, &format!("{name}.encoder"), d, heads, FF_FACTOR, p, rng)?,
            }))
        };
        let audio = raw("audio", c.audio_dim)?;
        let visual = raw("visual", c.visual_dim)?;
        let enhance_t = FeatureEnhancer::new(store, "enhance.text", c.text_parts(), d, rng)?;
        let enhance_a = FeatureEnhancer::new(store, "enhance.audio", c.audio_parts(), d, rng)?;
        let enhance_v = FeatureEnhancer::new(store, "enhance.visual", c.visual_parts(), d, rng)?;
        let core = if c.use_mfu {
            let dims = StackDims {
                d_model: d,
                seq_len: t,
                heads,
                ceu_layers: c.ceu_layers,
                mfu_layers: c.mfu_layers,
                dropout: p,
            };
            Core::Tpf(TpfStack::new(store, "tpf", dims, rng)?)
        } else {
            let layers = (1..=c.ceu_layers)
                .map(|j| EncoderLayer::new(store, &format!("tpf.ceu{j}"), d, heads, FF_FACTOR, p, rng))
                .collect::<Result<Vec<_>>>()?;
            Core::Additive(layers)
        };
        let fusion = if c.use_fusion_layer {
            Fusion::Attention(MultiHeadAttention::new(store, "fusion", d, heads, p, rng)?)
        } else {
            Fusion::Concat(Linear::new(store, "fusion.concat", 2 * d, d, Activation::None, rng)?)
        };
        let head = PredictionHead::new(store, "head", d, c.task, rng)?;
        Ok(Self {
            config,
            embedding,
            text_layer,
            bank_t,
            bank_a,
            bank_v,
            audio,
            visual,
            enhance_t,
            enhance_a,
            enhance_v,
            core,
            fusion,
            head,
        })
    }

    fn embed_text(&self, tape: &mut Tape, store: &ParamStore, ids: Vec<usize>, len: usize, bank: &TokenBank) -> Result<Var> {
        let b = ids.len() / len;
        let x = self.embedding.embed_ids(tape, store, &ids, b, len)?;
        unify(tape, store, x, bank, &self.text_layer)
    }

    fn encode_raw(&self, tape: &mut Tape, store: &ParamStore, path: &RawPath, data: Vec<f64>, shape: [usize; 3], bank: &TokenBank) -> Result<Var> {
        let x = tape.constant(Tensor::new(shape.to_vec(), data)?);
        let x = path.proj.forward(tape, store, x)?;
        unify(tape, store, x, bank, &path.layer)
    }

    /// Runs the network on a batch and returns every intermediate feature.
    pub fn trace(&self, tape: &mut Tape, store: &ParamStore, batch: &[EncodedSample]) -> Result<Trace> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let c = &self.config;
        let b = batch.len();
        for s in batch {
            let ok = s.text.len() == c.text_len
                && s.aed.len() == c.desc_len
                && s.ved.len() == c.desc_len
                && s.audio.len() == c.audio_len * c.audio_dim
                && s.visual.len() == c.visual_len * c.visual_dim;
            if !ok {
                return Err(Error::InvalidArgument("sample was encoded for a different configuration".into()));
            }
        }
        let gather = |f: fn(&EncodedSample) -> &Vec<usize>| batch.iter().flat_map(|s| f(s).iter().copied()).collect::<Vec<_>>();

        let x_t = self.embed_text(tape, store, gather(|s| &s.text), c.text_len, &self.bank_t)?;
        let d_a = if c.use_aed {
            Some(self.embed_text(tape, store, gather(|s| &s.aed), c.desc_len, &self.bank_a)?)
        } else {
            None
        };
        let d_v = if c.use_ved {
            Some(self.embed_text(tape, store, gather(|s| &s.ved), c.desc_len, &self.bank_v)?)
        } else {
            None
        };
        let x_a = match &self.audio {
            Some(path) => {
                let data = batch.iter().flat_map(|s| s.audio.iter().copied()).collect();
                Some(self.encode_raw(tape, store, path, data, [b, c.audio_len, c.audio_dim], &self.bank_a)?)
            }
            None => None,
        };
        let x_v = match &self.visual {
            Some(path) => {
                let data = batch.iter().flat_map(|s| s.visual.iter().copied()).collect();
                Some(self.encode_raw(tape, store, path, data, [b, c.visual_len, c.visual_dim], &self.bank_v)?)
            }
            None => None,
        };

        let text_parts: Vec<Var> = [Some(x_t), d_a, d_v].into_iter().flatten().collect();
        let audio_parts: Vec<Var> = [x_a, d_a].into_iter().flatten().collect();
        let visual_parts: Vec<Var> = [x_v, d_v].into_iter().flatten().collect();
        let h0_t = self.enhance_t.forward(tape, store, &text_parts)?;
        let h0_a = self.enhance_a.forward(tape, store, &audio_parts)?;
        let h0_v = self.enhance_v.forward(tape, store, &visual_parts)?;

        let (h_t, h_m) = match &self.core {
            Core::Tpf(stack) if c.use_ceu => stack.forward(tape, store, h0_t, h0_a, h0_v)?,
            Core::Tpf(stack) => stack.forward_unguided(tape, store, h0_t, h0_a, h0_v)?,
            Core::Additive(layers) => {
                let mut h = h0_t;
                for layer in layers {
                    h = layer.forward(tape, store, h)?;
                }
                (h, tape.add(h0_a, h0_v)?)
            }
        };
        let fused = match &self.fusion {
            Fusion::Attention(block) => ultimate_fusion(tape, store, block, h_t, h_m)?,
            Fusion::Concat(fc) => {
                let joined = tape.concat_last(&[h_t, h_m])?;
                fc.forward(tape, store, joined)?
            }
        };
        let output = self.head.predict(tape, store, fused)?;
        Ok(Trace {
            h0_t,
            h0_a,
            h0_v,
            h_t,
            h_m,
            fused,
            output,
        })
    }

    /// Predictions: `[B]` for regression, `[B, C]` logits for classification.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &[EncodedSample]) -> Result<Var> {
        Ok(self.trace(tape, store, batch)?.output)
    }

    /// The fusion stack when MFUs are enabled.
    pub fn tpf(&self) -> Option<&TpfStack> {
        match &self.core {
            Core::Tpf(s) => Some(s),
            Core::Additive(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::edg::DescriptionLexicon;
    use crate::tensor::grad_check;
    use crate::tpf::{compute_loss, LossMode, Targets};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            seq_len: 4,
            heads: 2,
            ceu_layers: 1,
            mfu_layers: 2,
            vocab_size: 64,
            text_len: 6,
            desc_len: 8,
            audio_dim: 3,
            visual_dim: 4,
            audio_len: 5,
            visual_len: 5,
            ..ModelConfig::default()
        }
    }

    fn samples(config: &ModelConfig, vocab: &Vocabulary, n: usize, seed: u64) -> Vec<EncodedSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words = ["good", "bad", "movie", "plot", "great", "awful"];
        (0..n)
            .map(|_| {
                let text: Vec<&str> = (0..4).map(|_| words[rng.gen_range(0..words.len())]).collect();
                let frames = |len: usize, dim: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
                    (0..len).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
                };
                let audio = frames(config.audio_len, config.audio_dim, &mut rng);
                let visual = frames(config.visual_len + 3, config.visual_dim, &mut rng);
                EncodedSample::new(
                    config,
                    vocab,
                    &text.join(" "),
                    "The Speaker made such an tone: high pitch, normal loudness, low jitter, and low shimmer.",
                    "The speaker made such an expression: raise cheek, pull lip corner.",
                    &audio,
                    &visual,
                )
                .unwrap()
            })
            .collect()
    }

    fn vocab(size: usize) -> Vocabulary {
        let lex = DescriptionLexicon::default();
        Vocabulary::build(lex.all_text(), ["good bad movie plot great awful"], size).unwrap()
    }

    #[test]
    fn config_validation() {
        ModelConfig::default().validate().unwrap();
        let bad = |f: fn(&mut ModelConfig)| {
            let mut c = ModelConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.mfu_layers = 2));
        assert!(bad(|c| c.heads = 5));
        assert!(bad(|c| c.dropout = 1.0));
        assert!(bad(|c| {
            c.use_raw_av = false;
            c.use_aed = false
        }));
        assert!(bad(|c| c.seq_len = 0));
    }

    #[test]
    fn frames_are_padded_and_truncated() {
        let c = tiny_config();
        let v = vocab(c.vocab_size);
        let s = EncodedSample::new(&c, &v, "good", "", "", &[vec![1.0, 2.0, 3.0]], &vec![vec![0.5; 4]; 9]).unwrap();
        assert_eq!(&s.audio[..3], &[1.0, 2.0, 3.0]);
        assert!(s.audio[3..].iter().all(|&x| x == 0.0));
        assert_eq!(s.visual.len(), 20);
        assert!(EncodedSample::new(&c, &v, "good", "", "", &[vec![1.0]], &[vec![0.5; 4]]).is_err());
        assert!(EncodedSample::new(&c, &v, "good", "", "", &[], &[vec![0.5; 4]]).is_err());
    }

    #[test]
    fn desk_model_shapes() {
        let c = ModelConfig::default();
        let v = vocab(c.vocab_size);
        let mut store = ParamStore::new();
        let model = Deva::new(c.clone(), &mut store, 1).unwrap();
        let batch = samples(&c, &v, 3, 2);
        let mut tape = Tape::with_dropout(4);
        let tr = model.trace(&mut tape, &store, &batch).unwrap();
        for h in [tr.h0_t, tr.h0_a, tr.h0_v, tr.h_t, tr.h_m, tr.fused] {
            assert_eq!(tape.shape(h), &[3, 8, 32]);
        }
        assert_eq!(tape.shape(tr.output), &[3]);
    }

    #[test]
    fn batch_rows_are_independent_without_dropout() {
        let c = tiny_config();
        let v = vocab(c.vocab_size);
        let mut store = ParamStore::new();
        let model = Deva::new(c.clone(), &mut store, 1).unwrap();
        let batch = samples(&c, &v, 4, 3);
        let mut tape = Tape::new();
        let all = model.forward(&mut tape, &store, &batch).unwrap();
        for (i, s) in batch.iter().enumerate() {
            let one = model.forward(&mut tape, &store, std::slice::from_ref(s)).unwrap();
            let (a, b) = (tape.value(all).data()[i], tape.value(one).data()[0]);
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ablations_build_and_run() {
        let v = vocab(64);
        let mut counts = Vec::new();
        let variants: [fn(&mut ModelConfig); 7] = [
            |_| {},
            |c| c.use_aed = false,
            |c| c.use_ved = false,
            |c| c.use_raw_av = false,
            |c| c.use_ceu = false,
            |c| c.use_mfu = false,
            |c| c.use_fusion_layer = false,
        ];
        for f in variants {
            let mut c = tiny_config();
            f(&mut c);
            let mut store = ParamStore::new();
            let model = Deva::new(c.clone(), &mut store, 5).unwrap();
            let mut tape = Tape::new();
            let y = model.forward(&mut tape, &store, &samples(&c, &v, 2, 6)).unwrap();
            assert_eq!(tape.shape(y), &[2]);
            assert!(tape.value(y).data().iter().all(|x| x.is_finite()));
            counts.push(store.num_elements());
        }
        assert!(counts[5] < counts[0], "no_mfu must drop parameters");
        assert!(counts[3] < counts[0]);
    }

    #[test]
    fn no_ceu_feeds_every_mfu_the_enhanced_text() {
        let mut c = tiny_config();
        c.use_ceu = false;
        let v = vocab(64);
        let mut store = ParamStore::new();
        let model = Deva::new(c.clone(), &mut store, 8).unwrap();
        let batch = samples(&c, &v, 2, 9);
        let mut tape = Tape::new();
        let tr = model.trace(&mut tape, &store, &batch).unwrap();
        let stack = model.tpf().unwrap();
        let mut h_m = stack.initial_minor(&mut tape, &store, tr.h0_t).unwrap();
        for mfu in &stack.mfu {
            h_m = mfu.forward(&mut tape, &store, tr.h0_t, tr.h0_a, tr.h0_v, h_m).unwrap();
        }
        assert_eq!(tape.value(h_m), tape.value(tr.h_m));
    }

    #[test]
    fn same_seed_same_parameters() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        Deva::new(tiny_config(), &mut a, 3).unwrap();
        Deva::new(tiny_config(), &mut b, 3).unwrap();
        for ((_, pa), (_, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn tiny_model_passes_grad_check() {
        let c = tiny_config();
        let v = vocab(c.vocab_size);
        let mut store = ParamStore::new();
        let model = Deva::new(c.clone(), &mut store, 11).unwrap();
        let batch = samples(&c, &v, 2, 12);
        let ids: Vec<_> = store.ids().collect();
        let report = grad_check(
            &mut store,
            &ids,
            |store| {
                let mut tape = Tape::new();
                let y = model.forward(&mut tape, store, &batch)?;
                let loss = compute_loss(&mut tape, y, &Targets::Real(vec![2.0, -2.0]), LossMode::Mae)?;
                Ok((tape, loss))
            },
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
    }
}
