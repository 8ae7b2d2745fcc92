//! Emotional description generator: turns prosody series and facial action
//! unit tracks into short descriptive sentences.
//!
//! Audio descriptions bin four utterance-level prosodic aggregates (pitch,
//! loudness, jitter, shimmer) into low / normal / high against tertile
//! boundaries fitted on a corpus. Visual descriptions list the phrases of the
//! `k` longest-active action units among those active for at least
//! [`MIN_RUN`] consecutive frames.

pub mod io;
mod lexicon;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use lexicon::{
    DescriptionLexicon, LevelPhrases, AU_SLOT, DEFAULT_AED_TEMPLATE, DEFAULT_NEUTRAL_EXPRESSION,
    DEFAULT_VED_TEMPLATE,
};

/// Consecutive active frames an AU needs to become a candidate.
pub const MIN_RUN: usize = 3;

/// Default number of AUs described per utterance.
pub const DEFAULT_TOP_K: usize = 4;

/// Default intensity above which an AU frame counts as active.
pub const DEFAULT_AU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProsodyFeature {
    Pitch,
    Loudness,
    Jitter,
    Shimmer,
}

impl ProsodyFeature {
    pub const ALL: [ProsodyFeature; 4] = [
        ProsodyFeature::Pitch,
        ProsodyFeature::Loudness,
        ProsodyFeature::Jitter,
        ProsodyFeature::Shimmer,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ProsodyFeature::Pitch => "pitch",
            ProsodyFeature::Loudness => "loudness",
            ProsodyFeature::Jitter => "jitter",
            ProsodyFeature::Shimmer => "shimmer",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Level {
    Low,
    Normal,
    High,
}

/// Facial action unit identifier, e.g. `AU12`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AuId(u8);

/// The sixteen AUs described by the generator, in ascending order.
pub const ALL_AUS: [AuId; 16] = [
    AuId(1),
    AuId(2),
    AuId(4),
    AuId(5),
    AuId(6),
    AuId(7),
    AuId(9),
    AuId(10),
    AuId(12),
    AuId(15),
    AuId(20),
    AuId(23),
    AuId(25),
    AuId(26),
    AuId(28),
    AuId(45),
];

impl AuId {
    pub fn new(number: u8) -> Result<Self> {
        let au = AuId(number);
        if ALL_AUS.contains(&au) {
            Ok(au)
        } else {
            Err(Error::InvalidArgument(format!("unknown action unit {au}")))
        }
    }

    pub fn number(self) -> u8 {
        self.0
    }

    /// Position within [`ALL_AUS`].
    pub fn slot(self) -> usize {
        ALL_AUS.iter().position(|&a| a == self).expect("validated AU")
    }
}

impl fmt::Display for AuId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AU{:02}", self.0)
    }
}

impl FromStr for AuId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let digits = s
            .trim()
            .strip_prefix("AU")
            .ok_or_else(|| Error::InvalidArgument(format!("not an AU label: {s}")))?;
        let n: u8 = digits
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("not an AU label: {s}")))?;
        AuId::new(n)
    }
}

/// Per-frame prosodic measurements of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct ProsodySeries {
    pitch: Vec<f64>,
    loudness: Vec<f64>,
    jitter: Vec<f64>,
    shimmer: Vec<f64>,
}

impl ProsodySeries {
    pub fn new(pitch: Vec<f64>, loudness: Vec<f64>, jitter: Vec<f64>, shimmer: Vec<f64>) -> Result<Self> {
        let n = pitch.len();
        if n == 0 {
            return Err(Error::InvalidArgument("prosody series has no frames".into()));
        }
        if loudness.len() != n || jitter.len() != n || shimmer.len() != n {
            return Err(Error::InvalidArgument("prosody channels differ in length".into()));
        }
        let all = pitch.iter().chain(&loudness).chain(&jitter).chain(&shimmer);
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prosody series"));
        }
        if jitter.iter().chain(&shimmer).any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("jitter and shimmer must be non-negative".into()));
        }
        Ok(Self {
            pitch,
            loudness,
            jitter,
            shimmer,
        })
    }

    pub fn from_frames(frames: &[[f64; 4]]) -> Result<Self> {
        let col = |i: usize| frames.iter().map(|f| f[i]).collect();
        Self::new(col(0), col(1), col(2), col(3))
    }

    pub fn len(&self) -> usize {
        self.pitch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pitch.is_empty()
    }

    pub fn channel(&self, feature: ProsodyFeature) -> &[f64] {
        match feature {
            ProsodyFeature::Pitch => &self.pitch,
            ProsodyFeature::Loudness => &self.loudness,
            ProsodyFeature::Jitter => &self.jitter,
            ProsodyFeature::Shimmer => &self.shimmer,
        }
    }
}

/// Utterance-level prosody: one scalar per feature, in [`ProsodyFeature::ALL`] order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProsodyAggregate(pub [f64; 4]);

impl ProsodyAggregate {
    pub fn get(&self, feature: ProsodyFeature) -> f64 {
        self.0[feature.index()]
    }
}

/// Frame mean of every feature.
pub fn aggregate_prosody(series: &ProsodySeries) -> ProsodyAggregate {
    let mut out = [0.0; 4];
    for f in ProsodyFeature::ALL {
        let ch = series.channel(f);
        out[f.index()] = ch.iter().sum::<f64>() / ch.len() as f64;
    }
    ProsodyAggregate(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tertiles {
    pub lower: f64,
    pub upper: f64,
}

/// Lower and upper tertile boundary for each prosodic feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TertileTable {
    pub pitch: Tertiles,
    pub loudness: Tertiles,
    pub jitter: Tertiles,
    pub shimmer: Tertiles,
}

impl TertileTable {
    pub fn get(&self, feature: ProsodyFeature) -> Tertiles {
        match feature {
            ProsodyFeature::Pitch => self.pitch,
            ProsodyFeature::Loudness => self.loudness,
            ProsodyFeature::Jitter => self.jitter,
            ProsodyFeature::Shimmer => self.shimmer,
        }
    }

    pub fn from_json_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: TertileTable = serde_json::from_str(&text)?;
        for f in ProsodyFeature::ALL {
            let t = table.get(f);
            if !(t.lower <= t.upper) {
                return Err(Error::Data(format!("{}: tertiles out of order", f.name())));
            }
        }
        Ok(table)
    }
}

/// Empirical quantile of sorted data, interpolating linearly between the
/// order statistics at fractional rank `(n - 1) * p`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Fits 1/3 and 2/3 quantile boundaries per feature.
pub fn fit_tertiles(corpus: &[ProsodyAggregate]) -> Result<TertileTable> {
    if corpus.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "tertile fitting needs at least 3 utterances, got {}",
            corpus.len()
        )));
    }
    let fit = |f: ProsodyFeature| -> Result<Tertiles> {
        let mut v: Vec<f64> = corpus.iter().map(|a| a.get(f)).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("fit_tertiles"));
        }
        v.sort_by(f64::total_cmp);
        Ok(Tertiles {
            lower: quantile_sorted(&v, 1.0 / 3.0),
            upper: quantile_sorted(&v, 2.0 / 3.0),
        })
    };
    Ok(TertileTable {
        pitch: fit(ProsodyFeature::Pitch)?,
        loudness: fit(ProsodyFeature::Loudness)?,
        jitter: fit(ProsodyFeature::Jitter)?,
        shimmer: fit(ProsodyFeature::Shimmer)?,
    })
}

/// `< lower` is low, `> upper` is high; boundary values are normal.
pub fn bin_level(value: f64, feature: ProsodyFeature, table: &TertileTable) -> Result<Level> {
    if value.is_nan() {
        return Err(Error::NonFinite("bin_level"));
    }
    let t = table.get(feature);
    Ok(if value < t.lower {
        Level::Low
    } else if value > t.upper {
        Level::High
    } else {
        Level::Normal
    })
}

pub fn describe_levels(levels: [Level; 4], lex: &DescriptionLexicon) -> String {
    let mut text = lex.aed_template.clone();
    for f in ProsodyFeature::ALL {
        let slot = format!("{{{}}}", f.name());
        text = text.replace(&slot, lex.prosody(f).get(levels[f.index()]));
    }
    text
}

/// Audio emotional description of one utterance.
pub fn generate_aed(series: &ProsodySeries, table: &TertileTable, lex: &DescriptionLexicon) -> Result<String> {
    let agg = aggregate_prosody(series);
    let mut levels = [Level::Normal; 4];
    for f in ProsodyFeature::ALL {
        levels[f.index()] = bin_level(agg.get(f), f, table)?;
    }
    Ok(describe_levels(levels, lex))
}

/// Per-frame activation of the sixteen AUs, in [`ALL_AUS`] column order.
#[derive(Clone, Debug, PartialEq)]
pub struct AuTrack {
    frames: Vec<[bool; 16]>,
    pub frame_rate: f64,
}

impl AuTrack {
    pub fn new(frames: Vec<[bool; 16]>, frame_rate: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("AU track has no frames".into()));
        }
        Ok(Self { frames, frame_rate })
    }

    /// Thresholds graded intensities: `value > threshold` is active.
    pub fn from_intensities(rows: &[[f64; 16]], threshold: f64, frame_rate: f64) -> Result<Self> {
        let frames = rows
            .iter()
            .map(|r| {
                let mut f = [false; 16];
                for (a, &v) in f.iter_mut().zip(r) {
                    *a = v > threshold;
                }
                f
            })
            .collect();
        Self::new(frames, frame_rate)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[[bool; 16]] {
        &self.frames
    }

    pub fn is_active(&self, frame: usize, au: AuId) -> bool {
        self.frames[frame][au.slot()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AuCandidate {
    pub au: AuId,
    /// Total active frames over the whole track.
    pub duration: usize,
    /// Start frame of the earliest run of at least [`MIN_RUN`] frames.
    pub first_onset: usize,
}

/// AUs with at least one run of [`MIN_RUN`] consecutive active frames, in AU order.
pub fn detect_candidates(track: &AuTrack) -> Vec<AuCandidate> {
    let mut out = Vec::new();
    for au in ALL_AUS {
        let slot = au.slot();
        let mut total = 0;
        let mut run = 0;
        let mut onset = None;
        for (i, frame) in track.frames.iter().enumerate() {
            if frame[slot] {
                total += 1;
                run += 1;
                if run == MIN_RUN && onset.is_none() {
                    onset = Some(i + 1 - MIN_RUN);
                }
            } else {
                run = 0;
            }
        }
        if let Some(first_onset) = onset {
            out.push(AuCandidate {
                au,
                duration: total,
                first_onset,
            });
        }
    }
    out
}

/// Longest-active first, ties to the lower AU number; at most `k` entries.
pub fn select_top_k(candidates: &[AuCandidate], k: usize) -> Result<Vec<AuId>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| b.duration.cmp(&a.duration).then(a.au.cmp(&b.au)));
    Ok(sorted.into_iter().take(k).map(|c| c.au).collect())
}

/// Visual emotional description. `template` must hold one [`AU_SLOT`].
pub fn generate_ved(aus: &[AuId], lex: &DescriptionLexicon, template: &str) -> Result<String> {
    if template.matches(AU_SLOT).count() != 1 {
        return Err(Error::InvalidArgument(format!(
            "VED template must contain exactly one {AU_SLOT}"
        )));
    }
    if aus.is_empty() {
        return Ok(lex.neutral_expression.clone());
    }
    let phrases = aus
        .iter()
        .map(|&au| {
            lex.au_phrase(au)
                .ok_or_else(|| Error::InvalidArgument(format!("{au} missing from lexicon")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(template.replace(AU_SLOT, &phrases.join(", ")))
}

/// Settings for turning one utterance's feature files into descriptions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgConfig {
    pub top_k: usize,
    pub au_threshold: f64,
}

impl Default for EdgConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            au_threshold: DEFAULT_AU_THRESHOLD,
        }
    }
}

/// Both descriptions of one utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptions {
    pub aed: String,
    pub ved: String,
}

pub fn describe(
    series: &ProsodySeries,
    track: &AuTrack,
    table: &TertileTable,
    lex: &DescriptionLexicon,
    top_k: usize,
) -> Result<Descriptions> {
    let aus = select_top_k(&detect_candidates(track), top_k)?;
    Ok(Descriptions {
        aed: generate_aed(series, table, lex)?,
        ved: generate_ved(&aus, lex, &lex.ved_template)?,
    })
}
