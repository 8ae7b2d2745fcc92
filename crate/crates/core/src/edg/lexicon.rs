use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AuId, Level, ProsodyFeature, ALL_AUS};
use crate::error::{Error, Result};

pub const DEFAULT_AED_TEMPLATE: &str =
    "The Speaker made such an tone: {pitch}, {loudness}, {jitter}, and {shimmer}.";
pub const DEFAULT_VED_TEMPLATE: &str = "The speaker made such an expression: {aus}.";
pub const DEFAULT_NEUTRAL_EXPRESSION: &str = "The speaker made a neutral expression.";

/// Slot in a VED template that receives the comma-joined AU phrases.
pub const AU_SLOT: &str = "{aus}";

const AU_PHRASES: [(u8, &str); 16] = [
    (1, "raise inner brow"),
    (2, "raise outer brow"),
    (4, "lower brow"),
    (5, "raise upper lid"),
    (6, "raise cheek"),
    (7, "tighten lid"),
    (9, "wrinkle nose"),
    (10, "raise upper lip"),
    (12, "pull lip corner"),
    (15, "depress lip corner"),
    (20, "stretch lip"),
    (23, "tighten lip"),
    (25, "part lip"),
    (26, "drop jaw"),
    (28, "suck lip"),
    (45, "blink"),
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelPhrases {
    pub low: String,
    pub normal: String,
    pub high: String,
}

impl LevelPhrases {
    fn for_feature(feature: &str) -> Self {
        Self {
            low: format!("low {feature}"),
            normal: format!("normal {feature}"),
            high: format!("high {feature}"),
        }
    }

    pub fn get(&self, level: Level) -> &str {
        match level {
            Level::Low => &self.low,
            Level::Normal => &self.normal,
            Level::High => &self.high,
        }
    }
}

/// Phrases and templates used to textualize prosody levels and facial AUs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescriptionLexicon {
    pub aed_template: String,
    pub ved_template: String,
    pub neutral_expression: String,
    pub pitch: LevelPhrases,
    pub loudness: LevelPhrases,
    pub jitter: LevelPhrases,
    pub shimmer: LevelPhrases,
    /// Keyed by AU label, e.g. `AU04`.
    pub au: BTreeMap<String, String>,
}

impl Default for DescriptionLexicon {
    fn default() -> Self {
        Self {
            aed_template: DEFAULT_AED_TEMPLATE.into(),
            ved_template: DEFAULT_VED_TEMPLATE.into(),
            neutral_expression: DEFAULT_NEUTRAL_EXPRESSION.into(),
            pitch: LevelPhrases::for_feature("pitch"),
            loudness: LevelPhrases::for_feature("loudness"),
            jitter: LevelPhrases::for_feature("jitter"),
            shimmer: LevelPhrases::for_feature("shimmer"),
            au: AU_PHRASES
                .iter()
                .map(|&(n, p)| (AuId(n).to_string(), p.to_string()))
                .collect(),
        }
    }
}

impl DescriptionLexicon {
    /// Reads a TOML override; absent keys keep their defaults and AU entries
    /// are merged over the default table.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let parsed: DescriptionLexicon =
            toml::from_str(text).map_err(|e| Error::Config(format!("lexicon: {e}")))?;
        let mut lex = parsed;
        let mut au = Self::default().au;
        au.append(&mut lex.au);
        lex.au = au;
        lex.validate()?;
        Ok(lex)
    }

    pub fn validate(&self) -> Result<()> {
        for key in self.au.keys() {
            key.parse::<AuId>()?;
        }
        for au in ALL_AUS {
            if !self.au.contains_key(&au.to_string()) {
                return Err(Error::Config(format!("lexicon has no phrase for {au}")));
            }
        }
        for slot in ["{pitch}", "{loudness}", "{jitter}", "{shimmer}"] {
            if self.aed_template.matches(slot).count() != 1 {
                return Err(Error::Config(format!("AED template needs exactly one {slot}")));
            }
        }
        if self.ved_template.matches(AU_SLOT).count() != 1 {
            return Err(Error::Config(format!("VED template needs exactly one {AU_SLOT}")));
        }
        Ok(())
    }

    pub fn prosody(&self, feature: ProsodyFeature) -> &LevelPhrases {
        match feature {
            ProsodyFeature::Pitch => &self.pitch,
            ProsodyFeature::Loudness => &self.loudness,
            ProsodyFeature::Jitter => &self.jitter,
            ProsodyFeature::Shimmer => &self.shimmer,
        }
    }

    pub fn au_phrase(&self, au: AuId) -> Option<&str> {
        self.au.get(&au.to_string()).map(String::as_str)
    }

    /// Every piece of text the generator can emit; used to seed vocabularies.
    pub fn all_text(&self) -> Vec<&str> {
        let mut out = vec![
            self.aed_template.as_str(),
            self.ved_template.as_str(),
            self.neutral_expression.as_str(),
        ];
        for f in ProsodyFeature::ALL {
            let p = self.prosody(f);
            out.extend([p.low.as_str(), p.normal.as_str(), p.high.as_str()]);
        }
        out.extend(self.au.values().map(String::as_str));
        out
    }
}
