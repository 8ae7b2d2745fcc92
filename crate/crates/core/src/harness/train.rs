//! Training loop: seeded mini-batches, AdamW with linear warmup, per-epoch
//! validation and best-valid-MAE parameter retention.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{OptimConfig, TrainConfig};
use super::data::{Example, Prepared};
use super::metrics::{compute_metrics, LabelRange, MetricsReport};
use crate::edg::TertileTable;
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Deva, EncodedSample};
use crate::tensor::{ParamStore, Tape, Tensor};
use crate::tpf::{compute_loss, Targets, Task};

/// Decoupled-weight-decay Adam. Moments are indexed like the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Applies one update from the gradients held in `store`. Parameters
    /// without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, cfg: &OptimConfig) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let Some(grad) = store.grad(id).map(|g| g.data().to_vec()) else {
                continue;
            };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.value_mut(id).data_mut();
            for k in 0..p.len() {
                let g = grad[k];
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr * cfg.weight_decay * p[k];
                p[k] -= lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
}

pub fn steps_per_epoch(train_len: usize, batch_size: usize) -> usize {
    train_len.div_ceil(batch_size)
}

/// Learning rate for optimizer step `step` (0-based): linear warmup over the
/// first `warmup_fraction` of all steps, then constant.
pub fn learning_rate(cfg: &OptimConfig, step: u64, total_steps: u64) -> f64 {
    let warm = (cfg.warmup_fraction * total_steps as f64).ceil() as u64;
    if step < warm {
        cfg.learning_rate * (step + 1) as f64 / warm as f64
    } else {
        cfg.learning_rate
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Dropout seed for optimizer step `step`.
pub fn dropout_seed(seed: u64, step: u64) -> u64 {
    splitmix64(seed ^ splitmix64(step))
}

/// Training-order permutation for `epoch` (0-based).
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Class index of a real label: sign for two classes, otherwise the label
/// scaled onto `classes` evenly spaced integer levels, rounded and clamped.
pub fn label_to_class(label: f64, classes: usize, range: LabelRange) -> usize {
    if classes == 2 {
        return usize::from(label >= 0.0);
    }
    let half = (classes - 1) as f64 / 2.0;
    let level = (label * half / range.bound()).round_ties_even().clamp(-half, half);
    (level + half) as usize
}

/// Real value represented by a class index; inverse of [`label_to_class`]
/// on the class centres.
pub fn class_to_value(class: usize, classes: usize, range: LabelRange) -> f64 {
    if classes == 2 {
        return if class == 1 { range.bound() / 2.0 } else { -range.bound() / 2.0 };
    }
    let half = (classes - 1) as f64 / 2.0;
    (class as f64 - half) * range.bound() / half
}

fn targets(task: Task, batch: &[&Example], range: LabelRange) -> Targets {
    match task {
        Task::Regression => Targets::Real(batch.iter().map(|e| e.label).collect()),
        Task::Classification { classes } => {
            Targets::Class(batch.iter().map(|e| label_to_class(e.label, classes, range)).collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub learning_rate: f64,
    pub valid: Option<MetricsReport>,
}

/// Parameters of the epoch with the lowest validation MAE.
#[derive(Clone, Debug, PartialEq)]
pub struct BestParams {
    pub epoch: usize,
    pub valid_mae: f64,
    pub params: Vec<Tensor>,
}

/// Full training state; everything needed to resume.
#[derive(Clone, Debug)]
pub struct Session {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub tertiles: TertileTable,
    pub label_range: LabelRange,
    pub model: Deva,
    pub store: ParamStore,
    pub optim: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub history: Vec<EpochRecord>,
    pub best: Option<BestParams>,
}

impl Session {
    pub fn new(config: TrainConfig, data: &Prepared) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = Deva::new(config.model.clone(), &mut store, config.optim.seed)?;
        let optim = AdamW::new(&store);
        Ok(Self {
            config,
            vocab: data.vocab.clone(),
            tertiles: data.tertiles.clone(),
            label_range: data.label_range,
            model,
            store,
            optim,
            epoch: 0,
            step: 0,
            history: Vec::new(),
            best: None,
        })
    }

    pub fn total_steps(&self, train_len: usize) -> u64 {
        (self.config.optim.epochs * steps_per_epoch(train_len, self.config.optim.batch_size)) as u64
    }

    /// Runs one epoch over `data.train`, then validates on `data.valid`.
    pub fn run_epoch(&mut self, data: &Prepared) -> Result<&EpochRecord> {
        if data.train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let cfg = self.config.optim.clone();
        let total = self.total_steps(data.train.len());
        let order = epoch_order(cfg.seed, self.epoch, data.train.len());
        let task = self.config.model.task;
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data.train[i]).collect();
            let samples: Vec<EncodedSample> = batch.iter().map(|e| e.sample.clone()).collect();
            let mut tape = Tape::with_dropout(dropout_seed(cfg.seed, self.step));
            let preds = self.model.forward(&mut tape, &self.store, &samples)?;
            let loss = compute_loss(&mut tape, preds, &targets(task, &batch, self.label_range), cfg.loss)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                let ids: Vec<String> = batch.iter().map(|e| e.id.clone()).collect();
                log::error!("non-finite loss at epoch {} batch {b}: {}", self.epoch + 1, ids.join(", "));
                return Err(Error::NonFiniteLoss {
                    epoch: self.epoch + 1,
                    batch: b,
                    ids,
                });
            }
            self.store.zero_grad();
            tape.backward(loss, &mut self.store)?;
            lr = learning_rate(&cfg, self.step, total);
            self.optim.step(&mut self.store, lr, &cfg);
            self.step += 1;
            loss_sum += value * batch.len() as f64;
        }
        self.store.zero_grad();
        self.epoch += 1;
        let valid = if data.valid.is_empty() {
            None
        } else {
            Some(self.evaluate(&data.valid, false)?)
        };
        let record = EpochRecord {
            epoch: self.epoch,
            train_loss: loss_sum / data.train.len() as f64,
            learning_rate: lr,
            valid,
        };
        log::info!(
            "epoch {} loss {:.4}{}",
            record.epoch,
            record.train_loss,
            record.valid.as_ref().map(|v| format!(" valid mae {:.4}", v.mae)).unwrap_or_default()
        );
        let improved = match (&record.valid, &self.best) {
            (Some(v), Some(best)) => v.mae < best.valid_mae,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            self.best = Some(BestParams {
                epoch: record.epoch,
                valid_mae: record.valid.as_ref().map_or(f64::NAN, |v| v.mae),
                params: self.store.iter().map(|(_, p)| p.value.clone()).collect(),
            });
        }
        self.history.push(record);
        Ok(self.history.last().expect("just pushed"))
    }

    /// Trains until `config.optim.epochs` epochs are complete.
    pub fn train(&mut self, data: &Prepared) -> Result<()> {
        while self.epoch < self.config.optim.epochs {
            self.run_epoch(data)?;
        }
        Ok(())
    }

    /// A parameter store holding the best-validation parameters, or the
    /// current ones when no validation split was seen.
    pub fn best_store(&self) -> ParamStore {
        let mut store = self.store.clone();
        if let Some(best) = &self.best {
            let ids: Vec<_> = store.ids().collect();
            for (id, value) in ids.into_iter().zip(&best.params) {
                *store.value_mut(id) = value.clone();
            }
        }
        store.zero_grad();
        store
    }

    /// Real-valued predictions with dropout off.
    pub fn predict(&self, examples: &[Example], use_best: bool) -> Result<Vec<f64>> {
        let best;
        let store = if use_best && self.best.is_some() {
            best = self.best_store();
            &best
        } else {
            &self.store
        };
        predict_with(&self.model, store, examples, self.config.optim.batch_size, self.label_range)
    }

    pub fn evaluate(&self, examples: &[Example], use_best: bool) -> Result<MetricsReport> {
        let preds = self.predict(examples, use_best)?;
        let labels: Vec<f64> = examples.iter().map(|e| e.label).collect();
        compute_metrics(&preds, &labels, self.label_range)
    }
}

/// Runs `model` over `examples` in batches and maps outputs to real values.
pub fn predict_with(model: &Deva, store: &ParamStore, examples: &[Example], batch_size: usize, range: LabelRange) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let samples: Vec<EncodedSample> = chunk.iter().map(|e| e.sample.clone()).collect();
        let mut tape = Tape::new();
        let preds = model.forward(&mut tape, store, &samples)?;
        let value = tape.value(preds);
        match model.config.task {
            Task::Regression => out.extend_from_slice(value.data()),
            Task::Classification { classes } => {
                for r in 0..chunk.len() {
                    let row = value.row(r);
                    let arg = row
                        .iter()
                        .enumerate()
                        .fold(0, |best, (i, &v)| if v > row[best] { i } else { best });
                    out.push(class_to_value(arg, classes, range));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{ingest, prepare};
    use crate::harness::synth::{generate_synthetic, SyntheticSpec};
    use crate::model::ModelConfig;

    fn tiny_config() -> TrainConfig {
        let model = ModelConfig {
            d_model: 16,
            seq_len: 4,
            heads: 2,
            ceu_layers: 1,
            mfu_layers: 2,
            vocab_size: 256,
            text_len: 12,
            desc_len: 24,
            audio_len: 10,
            visual_len: 10,
            ..ModelConfig::default()
        };
        let mut c = TrainConfig {
            model,
            ..TrainConfig::default()
        };
        c.optim.batch_size = 8;
        c.optim.epochs = 2;
        c.optim.learning_rate = 1e-3;
        c
    }

    fn tiny_data(config: &TrainConfig) -> Prepared {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            train: 24,
            valid: 8,
            test: 8,
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec, dir.path()).unwrap();
        let ds = ingest(dir.path()).unwrap();
        prepare(&ds, config, None, None).unwrap()
    }

    #[test]
    fn warmup_is_linear_then_constant() {
        let cfg = OptimConfig {
            learning_rate: 1.0,
            warmup_fraction: 0.1,
            ..OptimConfig::default()
        };
        let lrs: Vec<f64> = (0..12).map(|s| learning_rate(&cfg, s, 100)).collect();
        assert_eq!(lrs[0], 0.1);
        assert_eq!(lrs[4], 0.5);
        assert_eq!(lrs[9], 1.0);
        assert_eq!(lrs[11], 1.0);
        let none = OptimConfig {
            warmup_fraction: 0.0,
            ..cfg
        };
        assert_eq!(learning_rate(&none, 0, 100), 1.0);
    }

    #[test]
    fn adamw_matches_hand_computed_update() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(&store);
        let cfg = OptimConfig::default();
        store.accumulate(id, &[0.5, -0.25]);
        opt.step(&mut store, 0.1, &cfg);
        // first step: m̂ = g, v̂ = g², so the update is lr·g/(|g|+eps) after decay
        let expect = |p: f64, g: f64| {
            let p = p - 0.1 * 0.01 * p;
            p - 0.1 * g / (g.abs() + 1e-8)
        };
        let got = store.value(id).data();
        assert!((got[0] - expect(1.0, 0.5)).abs() < 1e-12);
        assert!((got[1] - expect(-2.0, -0.25)).abs() < 1e-12);
    }

    #[test]
    fn label_classes_round_trip() {
        for c in -3..=3 {
            let k = label_to_class(c as f64, 7, LabelRange::Seven);
            assert_eq!(k, (c + 3) as usize);
            assert_eq!(class_to_value(k, 7, LabelRange::Seven), c as f64);
        }
        assert_eq!(label_to_class(0.0, 2, LabelRange::Seven), 1);
        assert_eq!(label_to_class(-0.2, 2, LabelRange::Seven), 0);
        assert_eq!(label_to_class(1.0, 5, LabelRange::Unit), 4);
        assert_eq!(label_to_class(-0.3, 3, LabelRange::Unit), 1);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut config = tiny_config();
        config.optim.learning_rate = 0.0;
        config.optim.epochs = 1;
        let data = tiny_data(&config);
        let mut s = Session::new(config, &data).unwrap();
        let before: Vec<Tensor> = s.store.iter().map(|(_, p)| p.value.clone()).collect();
        s.run_epoch(&data).unwrap();
        let after: Vec<Tensor> = s.store.iter().map(|(_, p)| p.value.clone()).collect();
        assert_eq!(before, after);
        assert_eq!(s.step, 3);
    }

    #[test]
    fn same_seed_gives_identical_history() {
        let config = tiny_config();
        let data = tiny_data(&config);
        let run = || {
            let mut s = Session::new(config.clone(), &data).unwrap();
            s.train(&data).unwrap();
            (s.history.clone(), s.evaluate(&data.test, true).unwrap())
        };
        let (h1, m1) = run();
        let (h2, m2) = run();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        assert_eq!(h1.len(), 2);
        assert!(h1.iter().all(|r| r.train_loss.is_finite() && r.valid.is_some()));
    }

    #[test]
    fn classification_trains_with_cross_entropy() {
        let mut config = tiny_config();
        config.model.task = Task::Classification { classes: 7 };
        config.optim.loss = crate::tpf::LossMode::CrossEntropy;
        config.optim.epochs = 1;
        let data = tiny_data(&config);
        let mut s = Session::new(config, &data).unwrap();
        s.train(&data).unwrap();
        let preds = s.predict(&data.test, true).unwrap();
        assert!(preds.iter().all(|p| p.fract() == 0.0 && p.abs() <= 3.0));
    }

    #[test]
    fn best_params_track_lowest_valid_mae() {
        let mut config = tiny_config();
        config.optim.epochs = 3;
        let data = tiny_data(&config);
        let mut s = Session::new(config, &data).unwrap();
        s.train(&data).unwrap();
        let best = s.best.as_ref().unwrap();
        let min = s
            .history
            .iter()
            .map(|r| r.valid.as_ref().unwrap().mae)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(best.valid_mae, min);
        let re = s.evaluate(&data.valid, true).unwrap();
        assert_eq!(re.mae, min);
    }
}
