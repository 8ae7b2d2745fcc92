//! Seeded synthetic corpus whose labels are recoverable from every modality.
//!
//! Text carries tiered sentiment words (a fraction of texts carry none),
//! prosody shifts pitch and loudness with the label and widens jitter and
//! shimmer with its magnitude, and facial tracks hold AU06/AU12 runs for
//! positive labels and AU01/AU04/AU15 runs for negative ones, with run
//! length proportional to the magnitude.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::data::{UtteranceRecord, SPLITS};
use super::metrics::LabelRange;
use crate::edg::io::{write_au_csv, write_prosody_csv};
use crate::edg::AuId;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub label_range: LabelRange,
    pub seed: u64,
    /// Frames per audio and visual sequence.
    pub frames: usize,
    /// Width of the raw audio rows: four prosodic channels plus noise channels.
    pub audio_dim: usize,
    /// Probability that a text carries no sentiment word.
    pub uninformative_text: f64,
    /// Multiplier on the frame-level prosody noise.
    pub prosody_noise: f64,
    /// Standard deviation of AU intensity noise.
    pub visual_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train: 2000,
            valid: 250,
            test: 500,
            label_range: LabelRange::Seven,
            seed: 1,
            frames: 20,
            audio_dim: 8,
            uninformative_text: 0.15,
            prosody_noise: 1.0,
            visual_noise: 0.3,
        }
    }
}

impl SyntheticSpec {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.train + self.valid + self.test == 0 {
            return Err(Error::Config("synthetic spec has zero samples".into()));
        }
        if self.train == 0 {
            return Err(Error::Config("synthetic spec needs training samples".into()));
        }
        if self.frames < 8 {
            return Err(Error::Config("synthetic sequences need at least 8 frames".into()));
        }
        if self.audio_dim < 4 {
            return Err(Error::Config("audio_dim must hold the four prosodic channels".into()));
        }
        if !(0.0..=1.0).contains(&self.uninformative_text) || self.prosody_noise < 0.0 || self.visual_noise < 0.0 {
            return Err(Error::Config("noise settings out of range".into()));
        }
        Ok(())
    }

    /// Longest AU run the generator emits; reached at the extreme labels.
    pub fn max_run(&self) -> usize {
        self.frames - 4
    }
}

const NEUTRAL: [&str; 20] = [
    "the", "movie", "film", "plot", "actor", "scene", "story", "i", "think", "it", "was", "this", "just", "about",
    "character", "ending", "music", "and", "so", "then",
];
const POSITIVE: [[&str; 4]; 3] = [
    ["fine", "decent", "okay", "nice"],
    ["good", "enjoyable", "pleasant", "solid"],
    ["great", "amazing", "excellent", "brilliant"],
];
const NEGATIVE: [[&str; 4]; 3] = [
    ["meh", "dull", "bland", "flat"],
    ["bad", "boring", "weak", "poor"],
    ["awful", "terrible", "horrible", "dreadful"],
];

const POSITIVE_AUS: [u8; 2] = [6, 12];
const NEGATIVE_AUS: [u8; 3] = [1, 4, 15];

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

/// Sentiment polarity of a generated text: +/- tier weight per sentiment word.
pub fn text_polarity(text: &str) -> f64 {
    let mut score = 0.0;
    for tok in text.split_whitespace() {
        for (tier, (pos, neg)) in POSITIVE.iter().zip(&NEGATIVE).enumerate() {
            if pos.contains(&tok) {
                score += (tier + 1) as f64;
            }
            if neg.contains(&tok) {
                score -= (tier + 1) as f64;
            }
        }
    }
    score
}

struct Generated {
    record: UtteranceRecord,
    prosody: Vec<[f64; 4]>,
    au: Vec<[f64; 16]>,
    /// Observable aggregates used by the probe.
    probe: [f64; 5],
}

fn gen_text(rng: &mut ChaCha8Rng, y7: f64, informative: bool) -> String {
    let len = rng.gen_range(8..=12);
    let mut words: Vec<&str> = (0..len).map(|_| *NEUTRAL.choose(rng).unwrap()).collect();
    let mag = y7.abs();
    if informative && mag >= 0.5 {
        let tier = if mag < 1.5 { 0 } else if mag < 2.5 { 1 } else { 2 };
        let bank = if y7 > 0.0 { &POSITIVE[tier] } else { &NEGATIVE[tier] };
        for _ in 0..rng.gen_range(1..=2) {
            let at = rng.gen_range(0..=words.len());
            words.insert(at, bank.choose(rng).unwrap());
        }
    }
    words.join(" ")
}

fn gen_one(spec: &SyntheticSpec, rng: &mut ChaCha8Rng, id: String) -> Generated {
    let frames = spec.frames;
    let y7 = rng.gen_range(-15i32..=15) as f64 / 5.0;
    let label = match spec.label_range {
        LabelRange::Seven => y7,
        LabelRange::Unit => round4(y7 / 3.0),
    };
    let mag = y7.abs();
    let informative = !rng.gen_bool(spec.uninformative_text);
    let text = gen_text(rng, y7, informative);

    let pn = spec.prosody_noise;
    let pitch_n = Normal::new(150.0 + 30.0 * y7, 15.0 * pn + 1e-9).unwrap();
    let loud_n = Normal::new(60.0 + 5.0 * y7, 2.5 * pn + 1e-9).unwrap();
    let jit_n = Normal::new(0.01, 0.002 * (1.0 + mag)).unwrap();
    let shim_n = Normal::new(0.05, 0.01 * (1.0 + mag)).unwrap();
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut prosody = Vec::with_capacity(frames);
    let mut audio = Vec::with_capacity(frames);
    for _ in 0..frames {
        let p = round4(pitch_n.sample(rng));
        let l = round4(loud_n.sample(rng));
        let j = round4(jit_n.sample(rng).abs());
        let s = round4(shim_n.sample(rng).abs());
        prosody.push([p, l, j, s]);
        let mut row = vec![(p - 150.0) / 30.0, (l - 60.0) / 5.0, (j - 0.01) * 100.0, (s - 0.05) * 20.0];
        row.extend((4..spec.audio_dim).map(|_| unit.sample(rng)));
        audio.push(row.into_iter().map(|v| round4(v) as f32).collect::<Vec<f32>>());
    }

    let slot = |n: u8| AuId::new(n).expect("known AU").slot();
    let mut active = vec![[false; 16]; frames];
    let run = ((mag / 3.0) * spec.max_run() as f64).round() as usize;
    if run > 0 {
        let aus: &[u8] = if y7 > 0.0 { &POSITIVE_AUS } else { &NEGATIVE_AUS };
        let start = rng.gen_range(0..=frames - run);
        for &a in aus {
            for f in active.iter_mut().skip(start).take(run) {
                f[slot(a)] = true;
            }
        }
    }
    // talking and blinking, unrelated to the label
    let talk = rng.gen_range(0..=5);
    if talk > 0 {
        let start = rng.gen_range(0..=frames - talk);
        for f in active.iter_mut().skip(start).take(talk) {
            f[slot(25)] = true;
        }
    }
    for _ in 0..rng.gen_range(0..=2) {
        let len = rng.gen_range(1..=2);
        let start = rng.gen_range(0..=frames - len);
        for f in active.iter_mut().skip(start).take(len) {
            f[slot(45)] = true;
        }
    }
    let vn = Normal::new(0.0, spec.visual_noise + 1e-9).unwrap();
    let strength = 1.5 + 2.5 * mag / 3.0;
    let au: Vec<[f64; 16]> = active
        .iter()
        .map(|f| {
            let mut row = [0.0; 16];
            for (v, &on) in row.iter_mut().zip(f) {
                *v = if on {
                    round4((strength + vn.sample(rng)).clamp(0.6, 5.0))
                } else {
                    round4(rng.gen_range(0.0..0.3))
                };
            }
            row
        })
        .collect();
    let visual = au.iter().map(|r| r.iter().map(|&v| v as f32).collect()).collect();

    let n = frames as f64;
    let mean = |c: usize| prosody.iter().map(|p| p[c]).sum::<f64>() / n;
    let frac = |aus: &[u8]| active.iter().filter(|f| f[slot(aus[0])]).count() as f64 / n;
    let probe = [
        (mean(0) - 150.0) / 30.0,
        (mean(1) - 60.0) / 5.0,
        frac(&POSITIVE_AUS) - frac(&NEGATIVE_AUS),
        text_polarity(&text),
        1.0,
    ];
    Generated {
        record: UtteranceRecord {
            au_file: format!("au/{id}.csv"),
            prosody_file: format!("prosody/{id}.csv"),
            id,
            text,
            audio,
            visual,
            label,
        },
        prosody,
        au,
        probe,
    }
}

/// Solves the least-squares problem `min |X w - t|` through the normal equations.
fn least_squares(x: &[[f64; 5]], t: &[f64]) -> [f64; 5] {
    let mut a = [[0.0; 6]; 5];
    for (row, &target) in x.iter().zip(t) {
        for i in 0..5 {
            for j in 0..5 {
                a[i][j] += row[i] * row[j];
            }
            a[i][5] += row[i] * target;
        }
    }
    for (i, r) in a.iter_mut().enumerate() {
        r[i] += 1e-9;
    }
    for col in 0..5 {
        let pivot = (col..5).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
        a.swap(col, pivot);
        for r in 0..5 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..6 {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    std::array::from_fn(|i| a[i][5] / a[i][i])
}

/// Fits a linear sign probe on the training aggregates and returns its binary
/// accuracy on the held-out splits (the training split when nothing is held out).
fn probe_accuracy(train: &[([f64; 5], f64)], held_out: &[([f64; 5], f64)]) -> f64 {
    let fit: Vec<&([f64; 5], f64)> = train.iter().filter(|(_, y)| *y != 0.0).collect();
    let x: Vec<[f64; 5]> = fit.iter().map(|(f, _)| *f).collect();
    let t: Vec<f64> = fit.iter().map(|(_, y)| y.signum()).collect();
    let w = least_squares(&x, &t);
    let eval = if held_out.iter().any(|(_, y)| *y != 0.0) { held_out } else { train };
    let scored: Vec<bool> = eval
        .iter()
        .filter(|(_, y)| *y != 0.0)
        .map(|(f, y)| {
            let s: f64 = f.iter().zip(&w).map(|(a, b)| a * b).sum();
            (s > 0.0) == (*y > 0.0)
        })
        .collect();
    scored.iter().filter(|&&c| c).count() as f64 / scored.len().max(1) as f64
}

/// Minimum probe accuracy the generator must reach on non-zero labels.
pub const PROBE_THRESHOLD: f64 = 0.95;

/// Training samples below which the probe is not run.
const PROBE_MIN_SAMPLES: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub label_range: LabelRange,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub probe_acc2: Option<f64>,
    pub spec: Option<SyntheticSpec>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes the three splits, their AU and prosody files and `manifest.json`
/// under `out`. Fails if the linear probe self-test misses its threshold.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<Manifest> {
    spec.validate()?;
    let mkdir = |p: PathBuf| std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e));
    mkdir(out.join("au"))?;
    mkdir(out.join("prosody"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut probe_sets: Vec<Vec<([f64; 5], f64)>> = Vec::new();
    for (split, count) in SPLITS.iter().zip([spec.train, spec.valid, spec.test]) {
        let path = out.join(format!("{split}.jsonl"));
        let mut lines = String::new();
        let mut probe = Vec::with_capacity(count);
        for i in 0..count {
            let g = gen_one(spec, &mut rng, format!("{split}_{i:05}"));
            write_au_csv(&out.join(&g.record.au_file), &g.au)?;
            write_prosody_csv(&out.join(&g.record.prosody_file), &g.prosody)?;
            lines.push_str(&serde_json::to_string(&g.record)?);
            lines.push('\n');
            probe.push((g.probe, g.record.label));
        }
        std::fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
        probe_sets.push(probe);
    }

    let probe_acc2 = if probe_sets[0].len() >= PROBE_MIN_SAMPLES {
        let held: Vec<_> = probe_sets[1..].concat();
        let acc = probe_accuracy(&probe_sets[0], &held);
        if acc < PROBE_THRESHOLD {
            return Err(Error::Data(format!(
                "generator self-test failed: linear probe acc2 {acc:.3} < {PROBE_THRESHOLD}"
            )));
        }
        Some(acc)
    } else {
        None
    };
    let manifest = Manifest {
        format_version: 1,
        label_range: spec.label_range,
        train: spec.train,
        valid: spec.valid,
        test: spec.test,
        probe_acc2,
        spec: Some(spec.clone()),
    };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
