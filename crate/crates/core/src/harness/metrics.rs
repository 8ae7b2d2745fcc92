//! Sentiment regression metrics and the per-interval breakdown.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelRange {
    /// Scores in `[-3, 3]`.
    #[default]
    #[serde(rename = "[-3,3]")]
    Seven,
    /// Scores in `[-1, 1]`.
    #[serde(rename = "[-1,1]")]
    Unit,
}

impl LabelRange {
    pub fn bound(self) -> f64 {
        match self {
            LabelRange::Seven => 3.0,
            LabelRange::Unit => 1.0,
        }
    }
}

impl std::str::FromStr for LabelRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace(' ', "").as_str() {
            "[-3,3]" | "seven" => Ok(LabelRange::Seven),
            "[-1,1]" | "unit" => Ok(LabelRange::Unit),
            _ => Err(Error::Config(format!("unknown label range `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub acc2_incl_zero: f64,
    /// `None` when every label is zero.
    pub acc2_excl_zero: Option<f64>,
    pub f1_incl_zero: f64,
    pub f1_excl_zero: Option<f64>,
    /// Seven-class accuracy, `[-3, 3]` range only.
    pub acc7: Option<f64>,
    pub acc5: f64,
    /// Three-class accuracy, `[-1, 1]` range only.
    pub acc3: Option<f64>,
    pub mae: f64,
    pub corr: f64,
}

/// Support-weighted F1 over binary classes.
fn weighted_f1(pred: &[bool], truth: &[bool]) -> f64 {
    let n = truth.len() as f64;
    let mut total = 0.0;
    for class in [false, true] {
        let tp = pred.iter().zip(truth).filter(|(&p, &t)| p == class && t == class).count() as f64;
        let fp = pred.iter().zip(truth).filter(|(&p, &t)| p == class && t != class).count() as f64;
        let fneg = pred.iter().zip(truth).filter(|(&p, &t)| p != class && t == class).count() as f64;
        let support = tp + fneg;
        let denom = 2.0 * tp + fp + fneg;
        let f1 = if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
        total += support / n * f1;
    }
    total
}

fn accuracy(pred: &[i64], truth: &[i64]) -> f64 {
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Pearson correlation, defined as 0 when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

/// Class `i` holds values in `(edges[i], edges[i + 1]]`.
fn threshold_class(v: f64, edges: &[f64]) -> i64 {
    let v = v.clamp(-1.0, 1.0);
    edges
        .windows(2)
        .position(|w| v > w[0] && v <= w[1])
        .map_or(0, |i| i as i64)
}

const UNIT_EDGES_3: [f64; 4] = [-1.01, -0.1, 0.1, 1.01];
const UNIT_EDGES_5: [f64; 6] = [-1.01, -0.7, -0.1, 0.1, 0.7, 1.01];

pub fn compute_metrics(preds: &[f64], labels: &[f64], range: LabelRange) -> Result<MetricsReport> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("metrics over zero samples".into()));
    }
    if preds.iter().chain(labels).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("compute_metrics"));
    }
    let n = labels.len();

    let p_incl: Vec<bool> = preds.iter().map(|&p| p >= 0.0).collect();
    let t_incl: Vec<bool> = labels.iter().map(|&y| y >= 0.0).collect();
    let acc2_incl_zero = p_incl.iter().zip(&t_incl).filter(|(a, b)| a == b).count() as f64 / n as f64;
    let f1_incl_zero = weighted_f1(&p_incl, &t_incl);

    let (p_excl, t_excl): (Vec<bool>, Vec<bool>) = preds
        .iter()
        .zip(labels)
        .filter(|(_, &y)| y != 0.0)
        .map(|(&p, &y)| (p > 0.0, y > 0.0))
        .unzip();
    let (acc2_excl_zero, f1_excl_zero) = if t_excl.is_empty() {
        (None, None)
    } else {
        let acc = p_excl.iter().zip(&t_excl).filter(|(a, b)| a == b).count() as f64 / t_excl.len() as f64;
        (Some(acc), Some(weighted_f1(&p_excl, &t_excl)))
    };

    let (acc7, acc5, acc3) = match range {
        LabelRange::Seven => {
            let cls = |v: &[f64], lim: f64| -> Vec<i64> { v.iter().map(|x| x.round_ties_even().clamp(-lim, lim) as i64).collect() };
            (
                Some(accuracy(&cls(preds, 3.0), &cls(labels, 3.0))),
                accuracy(&cls(preds, 2.0), &cls(labels, 2.0)),
                None,
            )
        }
        LabelRange::Unit => {
            let cls = |v: &[f64], edges: &[f64]| -> Vec<i64> { v.iter().map(|&x| threshold_class(x, edges)).collect() };
            (
                None,
                accuracy(&cls(preds, &UNIT_EDGES_5), &cls(labels, &UNIT_EDGES_5)),
                Some(accuracy(&cls(preds, &UNIT_EDGES_3), &cls(labels, &UNIT_EDGES_3))),
            )
        }
    };

    let mae = preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / n as f64;
    Ok(MetricsReport {
        n,
        acc2_incl_zero,
        acc2_excl_zero,
        f1_incl_zero,
        f1_excl_zero,
        acc7,
        acc5,
        acc3,
        mae,
        corr: pearson(preds, labels),
    })
}

/// One label interval of the fine-grained breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalReport {
    pub interval: String,
    pub count: usize,
    /// `None` when no test label falls in the interval.
    pub metrics: Option<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineGrainedReport {
    pub intervals: Vec<IntervalReport>,
    /// Samples whose label is exactly zero.
    pub zero_count: usize,
    pub zero_metrics: Option<MetricsReport>,
}

/// Interval names and membership tests on the `[-3, 3]` scale.
const INTERVALS: [(&str, fn(f64) -> bool); 6] = [
    ("[-3,-2)", |y| y < -2.0),
    ("[-2,-1)", |y| (-2.0..-1.0).contains(&y)),
    ("[-1,0)", |y| (-1.0..0.0).contains(&y)),
    ("(0,+1]", |y| y > 0.0 && y <= 1.0),
    ("(+1,+2]", |y| y > 1.0 && y <= 2.0),
    ("(+2,+3]", |y| y > 2.0),
];

/// Partitions samples by true label into six unit-width intervals (scaled
/// to the label range) plus the exact zeros, and reports metrics per part.
pub fn fine_grained(preds: &[f64], labels: &[f64], range: LabelRange) -> Result<FineGrainedReport> {
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument("prediction and label counts differ".into()));
    }
    let scale = 3.0 / range.bound();
    let subset = |keep: &dyn Fn(f64) -> bool| -> Result<(usize, Option<MetricsReport>)> {
        let (p, y): (Vec<f64>, Vec<f64>) = preds.iter().zip(labels).filter(|(_, &y)| keep(y)).map(|(&p, &y)| (p, y)).unzip();
        let m = if y.is_empty() { None } else { Some(compute_metrics(&p, &y, range)?) };
        Ok((y.len(), m))
    };
    let mut intervals = Vec::with_capacity(INTERVALS.len());
    for (name, member) in INTERVALS {
        let (count, metrics) = subset(&|y| y != 0.0 && member(y * scale))?;
        intervals.push(IntervalReport {
            interval: name.to_string(),
            count,
            metrics,
        });
    }
    let (zero_count, zero_metrics) = subset(&|y| y == 0.0)?;
    Ok(FineGrainedReport {
        intervals,
        zero_count,
        zero_metrics,
    })
}
