//! Accuracy, F1 and the two kinds of overall score.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::domain::{Outcome, Target};
use crate::reasoning::Prediction;
use crate::synth::Tier;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u32,
    pub fp: u32,
    pub tn: u32,
    pub r#fn: u32,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.r#fn += 1,
        }
    }

    pub fn total(&self) -> u32 {
        self.tp + self.fp + self.tn + self.r#fn
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => f64::from(self.tp + self.tn) / f64::from(n),
        }
    }

    /// Positive-class F1; 0 when there is nothing to score.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.r#fn;
        if self.tp == 0 || denom == 0 {
            return 0.0;
        }
        f64::from(2 * self.tp) / f64::from(denom)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub accuracy: f64,
    pub f1: f64,
}

/// Unweighted mean over targets.
pub fn overall(scores: &[Score]) -> Score {
    if scores.is_empty() {
        return Score::default();
    }
    let n = scores.len() as f64;
    Score {
        accuracy: scores.iter().map(|s| s.accuracy).sum::<f64>() / n,
        f1: scores.iter().map(|s| s.f1).sum::<f64>() / n,
    }
}

/// Support-weighted mean of per-tier accuracies.
pub fn weighted_accuracy(rows: &[(f64, usize)]) -> f64 {
    let n: usize = rows.iter().map(|r| r.1).sum();
    if n == 0 {
        return 0.0;
    }
    rows.iter().map(|(a, k)| a * *k as f64).sum::<f64>() / n as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierRow {
    pub tier: Tier,
    pub support: usize,
    /// Mean over both targets of the per-target accuracy in this tier.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_target: BTreeMap<Target, Score>,
    pub overall: Score,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tiers: Vec<TierRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier_overall: Option<f64>,
    pub patients: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("labels and predictions disagree: missing {missing:?}, extra {extra:?}")]
    LabelMismatch { missing: Vec<String>, extra: Vec<String> },
}

/// Scores predictions against labels. Every labelled patient needs a
/// prediction for both targets and no prediction may be unlabelled.
pub fn evaluate(
    predictions: &[Prediction],
    labels: &BTreeMap<String, Outcome>,
    tiers: Option<&BTreeMap<String, Tier>>,
) -> Result<Metrics, MetricsError> {
    let mut by_patient: BTreeMap<&str, BTreeMap<Target, bool>> = BTreeMap::new();
    for p in predictions {
        by_patient.entry(p.patient_id.as_str()).or_default().insert(p.target, p.label);
    }
    let missing: Vec<String> = labels
        .keys()
        .filter(|pid| by_patient.get(pid.as_str()).is_none_or(|m| m.len() < Target::ALL.len()))
        .cloned()
        .collect();
    let labelled: BTreeSet<&str> = labels.keys().map(String::as_str).collect();
    let extra: Vec<String> =
        by_patient.keys().filter(|pid| !labelled.contains(*pid)).map(|s| String::from(*s)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(MetricsError::LabelMismatch { missing, extra });
    }

    let mut confusion: BTreeMap<Target, Confusion> = BTreeMap::new();
    let mut tier_conf: BTreeMap<Tier, BTreeMap<Target, Confusion>> = BTreeMap::new();
    for (pid, outcome) in labels {
        let preds = &by_patient[pid.as_str()];
        let tier = tiers.and_then(|m| m.get(pid));
        for t in Target::ALL {
            confusion.entry(t).or_default().add(preds[&t], outcome.get(t));
            if let Some(tier) = tier {
                tier_conf.entry(*tier).or_default().entry(t).or_default().add(preds[&t], outcome.get(t));
            }
        }
    }
    let per_target: BTreeMap<Target, Score> =
        confusion.iter().map(|(t, c)| (*t, Score { accuracy: c.accuracy(), f1: c.f1() })).collect();
    let scores: Vec<Score> = per_target.values().copied().collect();
    let tiers: Vec<TierRow> = tier_conf
        .iter()
        .map(|(tier, m)| TierRow {
            tier: *tier,
            support: m.values().next().map_or(0, |c| c.total() as usize),
            accuracy: m.values().map(Confusion::accuracy).sum::<f64>() / m.len() as f64,
        })
        .collect();
    let tier_overall =
        (!tiers.is_empty()).then(|| weighted_accuracy(&tiers.iter().map(|r| (r.accuracy, r.support)).collect::<Vec<_>>()));
    Ok(Metrics { per_target, overall: overall(&scores), tiers, tier_overall, patients: labels.len() })
}
