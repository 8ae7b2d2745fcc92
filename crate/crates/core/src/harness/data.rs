//! Dataset ingestion and conversion into model inputs.
//!
//! A dataset directory holds `train.jsonl`, `valid.jsonl` and `test.jsonl`
//! (one utterance object per line), the per-utterance AU and prosody CSV
//! files they reference, and optionally `manifest.json`.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{EdgSettings, TertileScope, TrainConfig};
use super::metrics::LabelRange;
use super::synth::{Manifest, MANIFEST_FILE};
use crate::edg::io::{parse_au_intensities, read_prosody, DEFAULT_FRAME_RATE};
use crate::edg::{
    aggregate_prosody, describe, fit_tertiles, AuTrack, DescriptionLexicon, Descriptions, ProsodySeries, TertileTable,
};
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::model::EncodedSample;

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// Largest fraction of utterances that may be skipped before ingestion fails.
pub const MAX_SKIPPED_FRACTION: f64 = 0.10;

/// One line of a split file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    pub text: String,
    pub audio: Vec<Vec<f32>>,
    pub visual: Vec<Vec<f32>>,
    pub au_file: String,
    pub prosody_file: String,
    pub label: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub text: String,
    pub audio: Vec<Vec<f64>>,
    pub visual: Vec<Vec<f64>>,
    pub prosody: ProsodySeries,
    /// Graded AU intensities in AU order.
    pub au: Vec<[f64; 16]>,
    pub label: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub label_range: LabelRange,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> &[Utterance] {
        match name {
            "train" => &self.train,
            "valid" => &self.valid,
            _ => &self.test,
        }
    }

    fn split_mut(&mut self, name: &str) -> &mut Vec<Utterance> {
        match name {
            "train" => &mut self.train,
            "valid" => &mut self.valid,
            _ => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_frames(rows: &[Vec<f32>], what: &str) -> std::result::Result<Vec<Vec<f64>>, String> {
    let Some(first) = rows.first() else {
        return Err(format!("empty {what} sequence"));
    };
    let width = first.len();
    if width == 0 {
        return Err(format!("{what} rows are empty"));
    }
    let mut out = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(format!("{what} row {i} has width {} instead of {width}", r.len()));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(format!("{what} row {i} is not finite"));
        }
        out.push(r.iter().map(|&v| v as f64).collect());
    }
    Ok(out)
}

fn load_utterance(dir: &Path, rec: UtteranceRecord, range: LabelRange, warnings: &mut Vec<String>) -> std::result::Result<Utterance, String> {
    if !rec.label.is_finite() || rec.label.abs() > range.bound() + 1e-9 {
        return Err(format!("label {} outside the {range:?} range", rec.label));
    }
    let audio = check_frames(&rec.audio, "audio")?;
    let visual = check_frames(&rec.visual, "visual")?;
    let au_path = dir.join(&rec.au_file);
    let au_file = std::fs::File::open(&au_path).map_err(|e| format!("{}: {e}", au_path.display()))?;
    let (au, au_warn) = parse_au_intensities(au_file, &au_path).map_err(|e| e.to_string())?;
    let pr_path = dir.join(&rec.prosody_file);
    if !pr_path.is_file() {
        return Err(format!("{}: missing prosody file", pr_path.display()));
    }
    let (prosody, pr_warn) = read_prosody(&pr_path).map_err(|e| e.to_string())?;
    for w in au_warn {
        warnings.push(format!("{}: {w}", au_path.display()));
    }
    for w in pr_warn {
        warnings.push(format!("{}: {w}", pr_path.display()));
    }
    Ok(Utterance {
        id: rec.id,
        text: rec.text,
        audio,
        visual,
        prosody,
        au,
        label: rec.label,
    })
}

/// Reads every split present in `dir`. Bad utterances are skipped with a
/// warning; more than [`MAX_SKIPPED_FRACTION`] skipped is an error.
pub fn ingest(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", dir.display())));
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let label_range = if manifest_path.is_file() {
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        serde_json::from_str::<Manifest>(&text)?.label_range
    } else {
        LabelRange::Seven
    };
    let mut ds = Dataset {
        label_range,
        ..Dataset::default()
    };
    let mut found = false;
    let mut total = 0usize;
    let mut skipped = 0usize;
    let mut ids = HashSet::new();
    for split in SPLITS {
        let path = dir.join(format!("{split}.jsonl"));
        if !path.is_file() {
            continue;
        }
        found = true;
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut utterances = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            total += 1;
            let loaded = serde_json::from_str::<UtteranceRecord>(line)
                .map_err(|e| e.to_string())
                .and_then(|rec| {
                    if ids.contains(&rec.id) {
                        Err(format!("duplicate id {}", rec.id))
                    } else {
                        load_utterance(dir, rec, label_range, &mut ds.warnings)
                    }
                });
            match loaded {
                Ok(u) => {
                    ids.insert(u.id.clone());
                    utterances.push(u);
                }
                Err(reason) => {
                    skipped += 1;
                    let msg = format!("{}:{}: skipped: {reason}", path.display(), i + 1);
                    log::warn!("{msg}");
                    ds.warnings.push(msg);
                }
            }
        }
        *ds.split_mut(split) = utterances;
    }
    if !found {
        return Err(Error::Data(format!("{} holds no split files", dir.display())));
    }
    if total == 0 {
        return Err(Error::Data(format!("{} holds no utterances", dir.display())));
    }
    if skipped as f64 > MAX_SKIPPED_FRACTION * total as f64 {
        return Err(Error::Data(format!(
            "skipped {skipped} of {total} utterances (more than {:.0}%)",
            MAX_SKIPPED_FRACTION * 100.0
        )));
    }
    log::info!(
        "ingested {} train / {} valid / {} test utterances",
        ds.train.len(),
        ds.valid.len(),
        ds.test.len()
    );
    Ok(ds)
}

/// An utterance ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub descriptions: Descriptions,
    pub sample: EncodedSample,
    pub label: f64,
}

/// Everything derived from a dataset and a config that the model consumes.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: Vocabulary,
    pub tertiles: TertileTable,
    pub lexicon: DescriptionLexicon,
    pub label_range: LabelRange,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

impl Prepared {
    pub fn split(&self, name: &str) -> &[Example] {
        match name {
            "train" => &self.train,
            "valid" => &self.valid,
            _ => &self.test,
        }
    }
}

pub fn load_lexicon(settings: &EdgSettings) -> Result<DescriptionLexicon> {
    match &settings.lexicon {
        Some(path) => DescriptionLexicon::from_toml_file(path),
        None => Ok(DescriptionLexicon::default()),
    }
}

/// Fits tertiles on the configured scope of `dataset`.
pub fn fit_dataset_tertiles(dataset: &Dataset, scope: TertileScope) -> Result<TertileTable> {
    let pool: Vec<&Utterance> = match scope {
        TertileScope::Train => dataset.train.iter().collect(),
        TertileScope::All => dataset.train.iter().chain(&dataset.valid).chain(&dataset.test).collect(),
    };
    let aggregates: Vec<_> = pool.iter().map(|u| aggregate_prosody(&u.prosody)).collect();
    fit_tertiles(&aggregates)
}

pub fn describe_utterance(u: &Utterance, tertiles: &TertileTable, lexicon: &DescriptionLexicon, settings: &EdgSettings) -> Result<Descriptions> {
    let track = AuTrack::from_intensities(&u.au, settings.au_threshold, DEFAULT_FRAME_RATE)?;
    describe(&u.prosody, &track, tertiles, lexicon, settings.top_k)
}

/// Generates descriptions and encodes every utterance. A vocabulary and
/// tertile table fitted earlier (e.g. stored in a checkpoint) are reused
/// when given; otherwise they are fitted on `dataset`.
pub fn prepare(dataset: &Dataset, config: &TrainConfig, vocab: Option<Vocabulary>, tertiles: Option<TertileTable>) -> Result<Prepared> {
    let lexicon = load_lexicon(&config.edg)?;
    let tertiles = match tertiles {
        Some(t) => t,
        None => fit_dataset_tertiles(dataset, config.edg.tertile_scope)?,
    };
    let vocab = match vocab {
        Some(v) => v,
        None => Vocabulary::build(
            lexicon.all_text(),
            dataset.train.iter().map(|u| u.text.as_str()),
            config.model.vocab_size,
        )?,
    };
    if vocab.len() > config.model.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} entries but the model holds {}",
            vocab.len(),
            config.model.vocab_size
        )));
    }
    let encode = |utts: &[Utterance]| -> Result<Vec<Example>> {
        utts.iter()
            .map(|u| {
                let descriptions = describe_utterance(u, &tertiles, &lexicon, &config.edg)?;
                let sample = EncodedSample::new(
                    &config.model,
                    &vocab,
                    &u.text,
                    &descriptions.aed,
                    &descriptions.ved,
                    &u.audio,
                    &u.visual,
                )
                .map_err(|e| Error::Data(format!("{}: {e}", u.id)))?;
                Ok(Example {
                    id: u.id.clone(),
                    descriptions,
                    sample,
                    label: u.label,
                })
            })
            .collect()
    };
    Ok(Prepared {
        train: encode(&dataset.train)?,
        valid: encode(&dataset.valid)?,
        test: encode(&dataset.test)?,
        vocab,
        tertiles,
        lexicon,
        label_range: dataset.label_range,
    })
}
