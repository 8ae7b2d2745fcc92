//! Whole-model gradient check on a small random batch.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::metrics::LabelRange;
use super::train::label_to_class;
use crate::edg::DescriptionLexicon;
use crate::encoder::Vocabulary;
use crate::error::Result;
use crate::model::{Deva, EncodedSample};
use crate::tensor::{grad_check, GradCheckReport, ParamStore, Tape};
use crate::tpf::{compute_loss, Targets, Task};

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
pub const BATCH: usize = 2;

/// Random samples drawn from the lexicon vocabulary, with real labels in
/// the seven-point range.
pub fn random_batch(config: &TrainConfig, n: usize, seed: u64) -> Result<(Vec<EncodedSample>, Vec<f64>)> {
    let m = &config.model;
    let lex = DescriptionLexicon::default();
    let vocab = Vocabulary::build(lex.all_text(), std::iter::empty(), m.vocab_size)?;
    let words: Vec<&str> = vocab.tokens()[2..].iter().map(String::as_str).collect();
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let sentence = |len: usize, rng: &mut ChaCha8Rng| -> String {
        (0..len).map(|_| *words.choose(rng).expect("vocabulary has words")).collect::<Vec<_>>().join(" ")
    };
    let mut samples = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let text = sentence(m.text_len, rng);
        let aed = sentence(m.desc_len, rng);
        let ved = sentence(m.desc_len, rng);
        let frames = |len: usize, dim: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..len).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
        };
        let audio = frames(m.audio_len, m.audio_dim, rng);
        let visual = frames(m.visual_len, m.visual_dim, rng);
        samples.push(EncodedSample::new(m, &vocab, &text, &aed, &ved, &audio, &visual)?);
        labels.push(rng.gen_range(-3.0..3.0));
    }
    Ok((samples, labels))
}

/// Builds the model from `config` with `seed`, then compares the tape
/// gradient of the configured loss with central differences for every
/// parameter. Dropout is off.
pub fn model_grad_check(config: &TrainConfig, seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    config.validate()?;
    let mut store = ParamStore::new();
    let model = Deva::new(config.model.clone(), &mut store, seed)?;
    let (batch, labels) = random_batch(config, BATCH, seed.wrapping_add(1))?;
    let targets = match config.model.task {
        Task::Regression => Targets::Real(labels),
        Task::Classification { classes } => Targets::Class(
            labels.iter().map(|&y| label_to_class(y, classes, LabelRange::Seven)).collect(),
        ),
    };
    let ids: Vec<_> = store.ids().collect();
    let mode = config.optim.loss;
    grad_check(
        &mut store,
        &ids,
        |store| {
            let mut tape = Tape::new();
            let y = model.forward(&mut tape, store, &batch)?;
            let loss = compute_loss(&mut tape, y, &targets, mode)?;
            Ok((tape, loss))
        },
        h,
        tol,
    )
}
