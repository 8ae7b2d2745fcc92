//! Component ablations: each toggle switches one part of the model off and
//! the variant is trained with the same seeds as the base model.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::data::Prepared;
use super::metrics::MetricsReport;
use super::train::Session;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toggle {
    NoAed,
    NoVed,
    NoRawAv,
    NoCeu,
    NoMfu,
    NoEdg,
    NoFusionLayer,
}

impl Toggle {
    pub const ALL: [Toggle; 7] = [
        Toggle::NoAed,
        Toggle::NoVed,
        Toggle::NoRawAv,
        Toggle::NoCeu,
        Toggle::NoMfu,
        Toggle::NoEdg,
        Toggle::NoFusionLayer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Toggle::NoAed => "no_aed",
            Toggle::NoVed => "no_ved",
            Toggle::NoRawAv => "no_raw_av",
            Toggle::NoCeu => "no_ceu",
            Toggle::NoMfu => "no_mfu",
            Toggle::NoEdg => "no_edg",
            Toggle::NoFusionLayer => "no_fusion_layer",
        }
    }

    /// The config with this component switched off.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        let m = &mut c.model;
        match self {
            Toggle::NoAed => m.use_aed = false,
            Toggle::NoVed => m.use_ved = false,
            Toggle::NoRawAv => m.use_raw_av = false,
            Toggle::NoCeu => m.use_ceu = false,
            Toggle::NoMfu => m.use_mfu = false,
            Toggle::NoEdg => {
                m.use_aed = false;
                m.use_ved = false;
            }
            Toggle::NoFusionLayer => m.use_fusion_layer = false,
        }
        c
    }
}

impl fmt::Display for Toggle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Toggle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Toggle::ALL.into_iter().find(|t| t.name() == s.trim()).ok_or_else(|| {
            let known: Vec<_> = Toggle::ALL.iter().map(|t| t.name()).collect();
            Error::Config(format!("unknown ablation toggle `{s}` (known: {})", known.join(", ")))
        })
    }
}

/// Parses a comma-separated toggle list; duplicates are dropped.
pub fn parse_toggles(list: &str) -> Result<Vec<Toggle>> {
    let mut out = Vec::new();
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        let t: Toggle = part.parse()?;
        if !out.contains(&t) {
            out.push(t);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub parameters: usize,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub mean_acc2_excl_zero: Option<f64>,
    pub mean_acc2_incl_zero: f64,
    pub mean_mae: f64,
    pub mean_corr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
    pub summary: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == name)
    }

    /// One row per run, then one mean row per variant.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::Data(e.to_string());
        w.write_record([
            "variant",
            "seed",
            "parameters",
            "acc2_incl_zero",
            "acc2_excl_zero",
            "f1_incl_zero",
            "f1_excl_zero",
            "acc7",
            "acc5",
            "acc3",
            "mae",
            "corr",
        ])
        .map_err(err)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.runs {
            let m = &r.metrics;
            w.write_record([
                r.variant.clone(),
                r.seed.to_string(),
                r.parameters.to_string(),
                m.acc2_incl_zero.to_string(),
                opt(m.acc2_excl_zero),
                m.f1_incl_zero.to_string(),
                opt(m.f1_excl_zero),
                opt(m.acc7),
                m.acc5.to_string(),
                opt(m.acc3),
                m.mae.to_string(),
                m.corr.to_string(),
            ])
            .map_err(err)?;
        }
        for s in &self.summary {
            w.write_record([
                s.variant.clone(),
                "mean".into(),
                String::new(),
                s.mean_acc2_incl_zero.to_string(),
                opt(s.mean_acc2_excl_zero),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                s.mean_mae.to_string(),
                s.mean_corr.to_string(),
            ])
            .map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn summarize(variant: &str, runs: &[AblationRun]) -> VariantSummary {
    let rs: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == variant).collect();
    let excl: Option<Vec<f64>> = rs.iter().map(|r| r.metrics.acc2_excl_zero).collect();
    VariantSummary {
        variant: variant.to_string(),
        runs: rs.len(),
        mean_acc2_excl_zero: excl.map(|v| mean(v.into_iter())),
        mean_acc2_incl_zero: mean(rs.iter().map(|r| r.metrics.acc2_incl_zero)),
        mean_mae: mean(rs.iter().map(|r| r.metrics.mae)),
        mean_corr: mean(rs.iter().map(|r| r.metrics.corr)),
    }
}

/// Trains the base config and every toggled variant once per seed and
/// evaluates the best-validation parameters on the test split.
pub fn ablate(base: &TrainConfig, toggles: &[Toggle], seeds: &[u64], data: &Prepared) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    if data.test.is_empty() {
        return Err(Error::Data("ablation needs a test split".into()));
    }
    let mut variants = vec![("base".to_string(), base.clone())];
    variants.extend(toggles.iter().map(|t| (t.name().to_string(), t.apply(base))));
    let mut runs = Vec::new();
    for (name, config) in &variants {
        config.validate()?;
        for &seed in seeds {
            let mut c = config.clone();
            c.optim.seed = seed;
            let mut session = Session::new(c, data)?;
            session.train(data)?;
            let metrics = session.evaluate(&data.test, true)?;
            log::info!("ablation {name} seed {seed}: mae {:.4}", metrics.mae);
            runs.push(AblationRun {
                variant: name.clone(),
                seed,
                parameters: session.store.num_elements(),
                metrics,
            });
        }
    }
    let summary = variants.iter().map(|(name, _)| summarize(name, &runs)).collect();
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        runs,
        summary,
    })
}
