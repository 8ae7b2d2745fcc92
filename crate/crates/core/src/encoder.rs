//! Unimodal coding, description encoding and feature enhancement.
//!
//! Every modality ends up as a fixed `T x d` feature: the projected (or
//! embedded) sequence is concatenated with `T` learnable bank rows, passed
//! through an encoder layer, and the first `T` output rows are kept.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, EncoderLayer, Linear};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Lowercases and splits on whitespace and punctuation. Punctuation is dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token to id map with `<pad>` at 0 and `<unk>` at 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(Error::Data(format!(
                "vocabulary must start with {PAD_TOKEN} and {UNK_TOKEN}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Builds a vocabulary of at most `size` entries. Tokens of `required`
    /// come first in order of appearance; the remaining slots go to corpus
    /// tokens by descending count, ties broken alphabetically.
    pub fn build<'a>(
        required: impl IntoIterator<Item = &'a str>,
        corpus: impl IntoIterator<Item = &'a str>,
        size: usize,
    ) -> Result<Self> {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        let mut seen: HashMap<String, usize> = HashMap::new();
        for text in required {
            for tok in tokenize(text) {
                if !seen.contains_key(&tok) {
                    seen.insert(tok.clone(), usize::MAX);
                    tokens.push(tok);
                }
            }
        }
        if tokens.len() > size {
            return Err(Error::Config(format!(
                "vocabulary size {size} cannot hold the {} required tokens",
                tokens.len()
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for tok in tokenize(text) {
                if !seen.contains_key(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = size - tokens.len();
        tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t));
        Self::from_tokens(tokens)
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_lines(&text)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    /// Token ids truncated or padded to `max_len`. Text without tokens
    /// becomes a single `<unk>`.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        let mut ids: Vec<usize> = tokenize(text).iter().map(|t| self.id(t)).collect();
        if ids.is_empty() {
            ids.push(UNK_ID);
        }
        ids.truncate(max_len);
        ids.resize(max_len, PAD_ID);
        Ok(ids)
    }
}

/// Sinusoidal position table: `sin(p / 10000^(2i/d))` at even columns and the
/// matching cosine at odd columns.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for p in 0..len {
        for i in 0..d {
            let freq = 10000f64.powf((i - i % 2) as f64 / d as f64);
            let angle = p as f64 / freq;
            data[p * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("positive extents")
}

/// Trainable `V x d` token table.
#[derive(Clone, Debug)]
pub struct TextEmbedding {
    pub table: ParamId,
    pub vocab_size: usize,
    pub d_model: usize,
}

impl TextEmbedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        vocab_size: usize,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let table = store.register(format!("{name}.table"), Tensor::randn(&[vocab_size, d_model], 1.0, rng))?;
        Ok(Self {
            table,
            vocab_size,
            d_model,
        })
    }

    /// Embeds `batch` rows of `len` ids each and adds positions: `[batch, len, d]`.
    pub fn embed_ids(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
        let table = tape.param(store, self.table);
        let x = tape.embedding(table, ids, &[batch, len])?;
        let pos = tape.constant(sinusoidal_positions(len, self.d_model));
        tape.add_trailing(x, pos)
    }
}

/// Embeds one string: `[max_len, d]`.
pub fn tokenize_embed(
    tape: &mut Tape,
    store: &ParamStore,
    text: &str,
    vocab: &Vocabulary,
    embedding: &TextEmbedding,
    max_len: usize,
) -> Result<Var> {
    let ids = vocab.encode(text, max_len)?;
    let x = embedding.embed_ids(tape, store, &ids, 1, max_len)?;
    tape.reshape(x, &[max_len, embedding.d_model])
}

/// Per-frame affine map from `d_m` to `d`.
pub fn project(tape: &mut Tape, store: &ParamStore, raw: Var, proj: &Linear) -> Result<Var> {
    proj.forward(tape, store, raw)
}

/// `T` learnable rows appended to a sequence before encoding.
#[derive(Clone, Debug)]
pub struct TokenBank {
    pub rows: ParamId,
    pub len: usize,
}

impl TokenBank {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, len: usize, d_model: usize, rng: &mut R) -> Result<Self> {
        if len == 0 {
            return Err(Error::Config("token bank length must be at least 1".into()));
        }
        let rows = store.register(name, Tensor::randn(&[len, d_model], 0.02, rng))?;
        Ok(Self { rows, len })
    }
}

/// Encodes `[seq; bank]` and returns the first `T` output rows. `seq` is
/// `[L, d]` or `[B, L, d]`; the output is `[T, d]` or `[B, T, d]`.
pub fn unify(tape: &mut Tape, store: &ParamStore, seq: Var, bank: &TokenBank, layer: &EncoderLayer) -> Result<Var> {
    let shape = tape.shape(seq).to_vec();
    let rows = tape.param(store, bank.rows);
    let (joined, axis) = match shape.len() {
        2 => (tape.concat(&[seq, rows], 0)?, 0),
        3 => {
            let b = tape.broadcast_leading(rows, shape[0])?;
            (tape.concat(&[seq, b], 1)?, 1)
        }
        _ => {
            return Err(Error::InvalidShape {
                shape,
                reason: "unify expects [L, d] or [B, L, d]".into(),
            })
        }
    };
    let encoded = layer.forward(tape, store, joined)?;
    tape.slice(encoded, axis, 0, bank.len)
}

/// Embeds a description and encodes it with the shared text layer and the
/// given modality bank.
#[allow(clippy::too_many_arguments)]
pub fn encode_description(
    tape: &mut Tape,
    store: &ParamStore,
    text: &str,
    vocab: &Vocabulary,
    embedding: &TextEmbedding,
    max_len: usize,
    bank: &TokenBank,
    layer: &EncoderLayer,
) -> Result<Var> {
    let x = tokenize_embed(tape, store, text, vocab, embedding, max_len)?;
    unify(tape, store, x, bank, layer)
}

/// `FC([p_1; ...; p_n])` over the feature axis, with a fixed part count.
#[derive(Clone, Debug)]
pub struct FeatureEnhancer {
    pub fc: Linear,
    pub parts: usize,
}

impl FeatureEnhancer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, parts: usize, d_model: usize, rng: &mut R) -> Result<Self> {
        if parts == 0 {
            return Err(Error::Config(format!("{name}: enhancement needs at least one part")));
        }
        let fc = Linear::new(store, name, parts * d_model, d_model, Activation::None, rng)?;
        Ok(Self { fc, parts })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, parts: &[Var]) -> Result<Var> {
        if parts.len() != self.parts {
            return Err(Error::InvalidArgument(format!(
                "feature enhancement expects {} parts, got {}",
                self.parts,
                parts.len()
            )));
        }
        let first = tape.shape(parts[0]).to_vec();
        for &p in &parts[1..] {
            if tape.shape(p) != first.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "feature_enhance",
                    lhs: first,
                    rhs: tape.shape(p).to_vec(),
                });
            }
        }
        let joined = tape.concat_last(parts)?;
        self.fc.forward(tape, store, joined)
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::grad_check;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn tokenizer_lowercases_and_splits_punctuation() {
        assert_eq!(tokenize("Good, movie!"), vec!["good", "movie"]);
        assert_eq!(tokenize("  "), Vec::<String>::new());
        assert_eq!(tokenize("The Speaker:low-pitch"), vec!["the", "speaker", "low", "pitch"]);
    }

    #[test]
    fn vocabulary_build_order_and_encode() {
        let v = Vocabulary::build(["b a"], ["x y y", "z y x"], 6).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "b", "a", "y", "x"]);
        assert_eq!(v.encode("A y unknown", 5).unwrap(), vec![3, 4, UNK_ID, PAD_ID, PAD_ID]);
        assert_eq!(v.encode("", 3).unwrap(), vec![UNK_ID, PAD_ID, PAD_ID]);
        assert_eq!(v.encode("...", 1).unwrap(), vec![UNK_ID]);
        assert_eq!(v.encode("b a b a", 2).unwrap(), vec![2, 3]);
        assert!(v.encode("a", 0).is_err());
        assert!(Vocabulary::build(["a b c d e"], [], 4).is_err());
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocabulary::build(["good movie"], ["bad film"], 16).unwrap();
        v.write_file(&path).unwrap();
        assert_eq!(Vocabulary::from_file(&path).unwrap(), v);
        assert!(Vocabulary::from_lines("a\nb\n").is_err());
        assert!(Vocabulary::from_lines("<pad>\n<unk>\nx\nx\n").is_err());
    }

    #[test]
    fn positions_match_formula() {
        let p = sinusoidal_positions(5, 6);
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let want = (3.0 / 10000f64.powf(2.0 / 6.0)).cos();
        assert_abs_diff_eq!(p.data()[3 * 6 + 3], want, epsilon = 1e-15);
    }

    #[test]
    fn tokenize_embed_rows_and_determinism() {
        let mut store = ParamStore::new();
        let vocab = Vocabulary::build(["good movie"], [], 8).unwrap();
        let emb = TextEmbedding::new(&mut store, "emb", vocab.len(), 4, &mut rng(0)).unwrap();
        let table = store.value(emb.table).clone();
        let pos = sinusoidal_positions(5, 4);
        let mut tape = Tape::new();
        let x = tokenize_embed(&mut tape, &store, "good strange", &vocab, &emb, 5).unwrap();
        assert_eq!(tape.shape(x), &[5, 4]);
        let want_ids = [vocab.id("good"), UNK_ID, PAD_ID, PAD_ID, PAD_ID];
        for (r, &id) in want_ids.iter().enumerate() {
            for c in 0..4 {
                let want = table.row(id)[c] + pos.row(r)[c];
                assert_eq!(tape.value(x).row(r)[c], want);
            }
        }
        let y = tokenize_embed(&mut tape, &store, "good strange", &vocab, &emb, 5).unwrap();
        assert_eq!(tape.value(x), tape.value(y));
    }

    #[test]
    fn project_identity_and_shape() {
        let mut store = ParamStore::new();
        let proj = Linear::new(&mut store, "p", 4, 4, Activation::None, &mut rng(1)).unwrap();
        store.set(proj.weight, Tensor::eye(4)).unwrap();
        store.set(proj.bias, Tensor::zeros(&[4])).unwrap();
        let raw = Tensor::randn(&[3, 4], 1.0, &mut rng(2));
        let mut tape = Tape::new();
        let x = tape.constant(raw.clone());
        let y = project(&mut tape, &store, x, &proj).unwrap();
        assert_eq!(tape.value(y), &raw);

        let wide = Linear::new(&mut store, "w", 33, 32, Activation::None, &mut rng(3)).unwrap();
        let x = tape.constant(Tensor::zeros(&[50, 33]));
        let y = project(&mut tape, &store, x, &wide).unwrap();
        assert_eq!(tape.shape(y), &[50, 32]);
        let bad = tape.constant(Tensor::zeros(&[50, 32]));
        assert!(project(&mut tape, &store, bad, &wide).is_err());
    }

    #[test]
    fn unify_shapes_and_bank_dependence() {
        let mut r = rng(4);
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut store, "enc", 32, 4, 4, 0.0, &mut r).unwrap();
        let bank = TokenBank::new(&mut store, "bank", 8, 32, &mut r).unwrap();
        let other = TokenBank::new(&mut store, "other", 8, 32, &mut r).unwrap();
        let seq = Tensor::randn(&[50, 32], 1.0, &mut r);
        let mut tape = Tape::new();
        let s = tape.constant(seq.clone());
        let a = unify(&mut tape, &store, s, &bank, &layer).unwrap();
        assert_eq!(tape.shape(a), &[8, 32]);
        let b = unify(&mut tape, &store, s, &other, &layer).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(b)) > 1e-6);

        let one = tape.constant(Tensor::randn(&[1, 32], 1.0, &mut r));
        let u1 = unify(&mut tape, &store, one, &bank, &layer).unwrap();
        assert_eq!(tape.shape(u1), &[8, 32]);

        // batched path agrees with the per-sample path
        let batch = tape.constant(Tensor::new(vec![2, 50, 32], [seq.data(), seq.data()].concat()).unwrap());
        let u = unify(&mut tape, &store, batch, &bank, &layer).unwrap();
        assert_eq!(tape.shape(u), &[2, 8, 32]);
        assert!(tape.value(u).data()[..256].iter().zip(tape.value(a).data()).all(|(x, y)| (x - y).abs() < 1e-12));

        let mut perturbed = store.value(bank.rows).clone();
        perturbed.data_mut()[0] += 0.5;
        store.set(bank.rows, perturbed).unwrap();
        let mut tape2 = Tape::new();
        let s2 = tape2.constant(seq);
        let c = unify(&mut tape2, &store, s2, &bank, &layer).unwrap();
        assert!(tape2.value(c).max_abs_diff(tape.value(a)) > 1e-6);
    }

    #[test]
    fn descriptions_are_deterministic_and_distinct() {
        let mut r = rng(5);
        let mut store = ParamStore::new();
        let lex = crate::edg::DescriptionLexicon::default();
        let vocab = Vocabulary::build(lex.all_text(), [], 128).unwrap();
        let emb = TextEmbedding::new(&mut store, "emb", vocab.len(), 32, &mut r).unwrap();
        let layer = EncoderLayer::new(&mut store, "enc", 32, 4, 4, 0.0, &mut r).unwrap();
        let bank = TokenBank::new(&mut store, "bank_v", 8, 32, &mut r).unwrap();
        let mut tape = Tape::new();
        let enc = |tape: &mut Tape, s: &str| encode_description(tape, &store, s, &vocab, &emb, 24, &bank, &layer).unwrap();
        let smile = "The speaker made such an expression: raise cheek, pull lip corner.";
        let a = enc(&mut tape, smile);
        let b = enc(&mut tape, smile);
        let n = enc(&mut tape, &lex.neutral_expression);
        assert_eq!(tape.shape(a), &[8, 32]);
        assert_eq!(tape.value(a), tape.value(b));
        assert!(tape.value(a).max_abs_diff(tape.value(n)) > 1e-6);
    }

    #[test]
    fn enhancement_parts_linearity_and_zero() {
        let mut r = rng(6);
        let mut store = ParamStore::new();
        let text = FeatureEnhancer::new(&mut store, "fe_t", 3, 8, &mut r).unwrap();
        let audio = FeatureEnhancer::new(&mut store, "fe_a", 2, 8, &mut r).unwrap();
        let parts: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[4, 8], 1.0, &mut r)).collect();
        let extra: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[4, 8], 1.0, &mut r)).collect();

        let mut tape = Tape::new();
        let p: Vec<Var> = parts.iter().map(|t| tape.constant(t.clone())).collect();
        let q: Vec<Var> = extra.iter().map(|t| tape.constant(t.clone())).collect();
        let s: Vec<Var> = p.iter().zip(&q).map(|(&a, &b)| tape.add(a, b).unwrap()).collect();
        let hp = text.forward(&mut tape, &store, &p).unwrap();
        let hq = text.forward(&mut tape, &store, &q).unwrap();
        let hs = text.forward(&mut tape, &store, &s).unwrap();
        assert_eq!(tape.shape(hs), &[4, 8]);
        // H(a + b) = H(a) + H(b) - bias
        let bias = tape.param(&store, text.fc.bias);
        let sum = tape.add(hp, hq).unwrap();
        let neg = tape.scale(bias, -1.0);
        let want = tape.add_trailing(sum, neg).unwrap();
        assert!(tape.value(hs).max_abs_diff(tape.value(want)) < 1e-12);

        assert!(audio.forward(&mut tape, &store, &p).is_err());
        let ha = audio.forward(&mut tape, &store, &p[..2]).unwrap();
        assert_eq!(tape.shape(ha), &[4, 8]);

        store.set(text.fc.weight, Tensor::zeros(&[24, 8])).unwrap();
        store.set(text.fc.bias, Tensor::zeros(&[8])).unwrap();
        let mut tape = Tape::new();
        let p: Vec<Var> = parts.iter().map(|t| tape.constant(t.clone())).collect();
        let z = text.forward(&mut tape, &store, &p).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_path_passes_grad_check() {
        // seed chosen so no relu pre-activation sits within one step of its kink
        let mut r = rng(9);
        let mut store = ParamStore::new();
        let vocab = Vocabulary::build(["good bad movie"], [], 8).unwrap();
        let emb = TextEmbedding::new(&mut store, "emb", vocab.len(), 8, &mut r).unwrap();
        let layer_t = EncoderLayer::new(&mut store, "enc_t", 8, 2, 2, 0.1, &mut r).unwrap();
        let layer_a = EncoderLayer::new(&mut store, "enc_a", 8, 2, 2, 0.1, &mut r).unwrap();
        let bank_t = TokenBank::new(&mut store, "bank_t", 3, 8, &mut r).unwrap();
        let bank_a = TokenBank::new(&mut store, "bank_a", 3, 8, &mut r).unwrap();
        let proj = Linear::new(&mut store, "proj_a", 5, 8, Activation::None, &mut r).unwrap();
        let fe = FeatureEnhancer::new(&mut store, "fe_t", 3, 8, &mut r).unwrap();
        let audio = Tensor::randn(&[6, 5], 1.0, &mut r);
        let ids: Vec<_> = store.ids().collect();
        let report = grad_check(
            &mut store,
            &ids,
            |store| {
                let mut tape = Tape::new();
                let x = tokenize_embed(&mut tape, store, "good movie", &vocab, &emb, 4)?;
                let x_t = unify(&mut tape, store, x, &bank_t, &layer_t)?;
                let d_a = encode_description(&mut tape, store, "bad", &vocab, &emb, 4, &bank_a, &layer_t)?;
                let a = tape.constant(audio.clone());
                let a = project(&mut tape, store, a, &proj)?;
                let x_a = unify(&mut tape, store, a, &bank_a, &layer_a)?;
                let h = fe.forward(&mut tape, store, &[x_t, d_a, x_a])?;
                let sq = tape.square(h);
                let loss = tape.mean_all(sq);
                Ok((tape, loss))
            },
            1e-4,
            1e-3,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures().collect::<Vec<_>>());
    }
}
