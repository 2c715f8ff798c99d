//! Prediction synthesis from profile, case evidence and trial evidence.
//!
//! The deterministic scorer is a logit-additive model:
//! `sigmoid(logit(prior) + Σ effects + λ·(logit(p̃) − logit(prior)))` with
//! `p̃ = (positives + 1) / (n + 2)` over retrieved resolved cases. Model
//! mode asks the gateway for a cited answer and falls back to the scorer.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::domain::{Field, Target, UnifiedProfile};
use crate::evidence::{Direction, Effect, FactorMatch, PrognosticFactor, ScoredChunk};
use crate::gateway::{parse_json_object, repair_prompt, Gateway, GatewayError, PromptRequest, SchemaRegistry};
use crate::math::{logit, sigmoid};
use crate::memory::RetrievalResult;
use crate::prompts;

pub const SCHEMA_PREDICTION: &str = "prediction.v1";
pub const DEFAULT_LAMBDA: f64 = 1.0;
pub const DEFAULT_DELTA: f64 = 0.2;
/// Memory base rates are kept this far from 0 and 1 so their logit stays
/// finite.
pub const PRIOR_FLOOR: f64 = 0.01;
pub const PATIENT_ID_REF: &str = "patient_id";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CitationKind {
    Profile,
    Case,
    Trial,
}

impl CitationKind {
    pub fn tag_prefixes(self) -> &'static [&'static str] {
        match self {
            CitationKind::Profile => &["profile"],
            CitationKind::Case => &["case"],
            CitationKind::Trial => &["trial", "factor"],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Citation {
    pub kind: CitationKind,
    #[serde(rename = "ref")]
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quote: Option<String>,
}

impl Citation {
    pub fn new(kind: CitationKind, reference: &str) -> Self {
        Citation { kind, reference: reference.to_string(), quote: None }
    }

    pub fn key(&self) -> (CitationKind, String) {
        (self.kind, self.reference.clone())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionMode {
    Model,
    #[default]
    Deterministic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub patient_id: String,
    pub target: Target,
    pub label: bool,
    pub probability: f64,
    pub mode: PredictionMode,
    pub citations: Vec<Citation>,
    pub rationale: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Prediction {
    pub fn cites(&self, kind: CitationKind) -> usize {
        self.citations.iter().filter(|c| c.kind == kind).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReasonConfig {
    pub lambda: f64,
    pub delta: f64,
}

impl Default for ReasonConfig {
    fn default() -> Self {
        ReasonConfig { lambda: DEFAULT_LAMBDA, delta: DEFAULT_DELTA }
    }
}

/// A retrieved passage together with the query that found it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub query: String,
    pub chunk: ScoredChunk,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialEvidence {
    pub factors: Vec<FactorMatch>,
    pub passages: Vec<Passage>,
}

/// Logit contribution of `factor` to `target`, or `None` if the factor is
/// about the other target. Rate effects are measured against `reference`
/// and clipped to the factor's stated direction.
pub fn effect_term(factor: &PrognosticFactor, target: Target, reference: f64, delta: f64) -> Option<f64> {
    if factor.target != target {
        return None;
    }
    let raw = match factor.effect {
        Some(Effect::ResponseRate(r)) => logit(r.clamp(PRIOR_FLOOR, 1.0 - PRIOR_FLOOR)) - logit(reference),
        Some(Effect::HazardRatio(h)) => -libm::log(h),
        None => factor.direction.sign() * delta,
    };
    Some(match factor.direction {
        Direction::Favorable => raw.max(0.0),
        Direction::Unfavorable => raw.min(0.0),
    })
}

fn clamp_prior(p: f64) -> f64 {
    p.clamp(PRIOR_FLOOR, 1.0 - PRIOR_FLOOR)
}

/// Every reference an answer about `profile` may cite.
pub fn supplied_refs(
    profile: &UnifiedProfile,
    retrieval: &RetrievalResult,
    trial: &TrialEvidence,
) -> BTreeSet<(CitationKind, String)> {
    let mut refs = BTreeSet::new();
    refs.insert((CitationKind::Profile, PATIENT_ID_REF.to_string()));
    for f in profile.features.known_fields() {
        refs.insert((CitationKind::Profile, f.name().to_string()));
    }
    for c in &retrieval.cases {
        refs.insert((CitationKind::Case, c.entry.entry_id.clone()));
    }
    for m in &trial.factors {
        refs.insert((CitationKind::Trial, m.factor.factor_id.clone()));
    }
    for p in &trial.passages {
        refs.insert((CitationKind::Trial, p.chunk.chunk_id.clone()));
    }
    refs
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitationReport {
    pub unresolved: Vec<Citation>,
    pub violations: Vec<String>,
}

impl CitationReport {
    pub fn is_ok(&self) -> bool {
        self.unresolved.is_empty() && self.violations.is_empty()
    }
}

pub fn validate_citations(pred: &Prediction, supplied: &BTreeSet<(CitationKind, String)>) -> CitationReport {
    let mut report = CitationReport::default();
    if pred.citations.is_empty() {
        report.violations.push("citations non-empty".to_string());
    }
    for c in &pred.citations {
        if !supplied.contains(&c.key()) {
            report.unresolved.push(c.clone());
        }
    }
    report
}

/// The deterministic scorer for one target. `prior` is the memory-wide base
/// rate, `None` when memory is empty.
pub fn deterministic_score(
    profile: &UnifiedProfile,
    retrieval: &RetrievalResult,
    trial: &TrialEvidence,
    prior: Option<f64>,
    target: Target,
    cfg: &ReasonConfig,
) -> Prediction {
    let (positives, resolved) = retrieval.outcome_counts(target);
    let relevant: Vec<(&FactorMatch, f64)> = trial
        .factors
        .iter()
        .filter_map(|m| {
            let reference = clamp_prior(prior.unwrap_or(0.5));
            effect_term(&m.factor, target, reference, cfg.delta).map(|e| (m, e))
        })
        .collect();

    if relevant.is_empty() && resolved == 0 && prior.is_none() {
        return Prediction {
            patient_id: profile.patient_id.clone(),
            target,
            label: true,
            probability: 0.5,
            mode: PredictionMode::Deterministic,
            citations: alloc::vec![Citation::new(CitationKind::Profile, PATIENT_ID_REF)],
            rationale: "no case evidence, no matching factors and no memory prior; probability 0.5".to_string(),
            warnings: alloc::vec!["MissingInputs".to_string()],
        };
    }

    let prior_p = clamp_prior(prior.unwrap_or(0.5));
    let base = logit(prior_p);
    let effects: f64 = relevant.iter().map(|(_, e)| e).sum();
    let mut z = base + effects;
    let mut parts = alloc::vec![format!("prior {prior_p:.3}")];
    let mut citations = Vec::new();
    let mut fields_used: BTreeSet<Field> = BTreeSet::new();
    for (m, e) in &relevant {
        fields_used.insert(m.factor.field);
        parts.push(format!("{} {}={} ({:+.3})", m.factor.factor_id, m.factor.field, m.observed, e));
    }
    if resolved > 0 && cfg.lambda != 0.0 {
        let p_tilde = (f64::from(positives) + 1.0) / (f64::from(resolved) + 2.0);
        let term = cfg.lambda * (logit(p_tilde) - base);
        z += term;
        parts.push(format!("cases {positives}/{resolved} ({term:+.3})"));
        for c in &retrieval.cases {
            if c.entry.outcome.is_some() {
                citations.push(Citation::new(CitationKind::Case, &c.entry.entry_id));
            }
        }
    }
    let probability = sigmoid(z);
    parts.push(format!("p={probability:.3}"));

    let mut profile_cites: Vec<Citation> =
        fields_used.iter().map(|f| Citation::new(CitationKind::Profile, f.name())).collect();
    if profile_cites.is_empty() {
        profile_cites.push(Citation::new(CitationKind::Profile, PATIENT_ID_REF));
    }
    let mut trial_cites = Vec::new();
    for (m, _) in &relevant {
        trial_cites.push(Citation::new(CitationKind::Trial, &m.factor.factor_id));
        for p in trial.passages.iter().filter(|p| p.query == m.factor.query) {
            let c = Citation {
                kind: CitationKind::Trial,
                reference: p.chunk.chunk_id.clone(),
                quote: None,
            };
            if !trial_cites.contains(&c) {
                trial_cites.push(c);
            }
        }
    }
    profile_cites.extend(citations);
    profile_cites.extend(trial_cites);

    Prediction {
        patient_id: profile.patient_id.clone(),
        target,
        label: probability >= 0.5,
        probability,
        mode: PredictionMode::Deterministic,
        citations: profile_cites,
        rationale: parts.join("; "),
        warnings: Vec::new(),
    }
}

/// Both targets through the deterministic scorer.
pub fn deterministic_predictions(
    profile: &UnifiedProfile,
    retrieval: &RetrievalResult,
    trial: &TrialEvidence,
    priors: impl Fn(Target) -> Option<f64>,
    cfg: &ReasonConfig,
) -> Vec<Prediction> {
    Target::ALL
        .into_iter()
        .map(|t| deterministic_score(profile, retrieval, trial, priors(t), t, cfg))
        .collect()
}

// ---------------------------------------------------------------------------
// model mode

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Renders the three prompt sections. Every line that can be cited starts
/// with its `[kind:ref]` tag.
pub fn render_sections(profile: &UnifiedProfile, retrieval: &RetrievalResult, trial: &TrialEvidence) -> (String, String, String) {
    let mut p = alloc::vec![format!("[profile:{PATIENT_ID_REF}] {PATIENT_ID_REF}: {}", profile.patient_id)];
    for f in profile.features.known_fields() {
        if let Some(v) = profile.get(f) {
            p.push(format!("[profile:{f}] {f}: {v}"));
        }
    }
    let mut c = Vec::new();
    for case in &retrieval.cases {
        let outcome = match case.entry.outcome {
            Some(o) => format!("psa_response={} os_gt_12m={}", yes_no(o.psa_response), yes_no(o.os_gt_12m)),
            None => "outcome pending".to_string(),
        };
        let k = case.entry.key;
        c.push(format!(
            "[case:{}] similarity {:.3}; {}; psma {} liver {} lung {} prior_chemo {}",
            case.entry.entry_id,
            case.similarity,
            outcome,
            k.psma_level.as_str(),
            k.liver_met.as_str(),
            k.lung_met.as_str(),
            k.prior_chemo.as_str()
        ));
    }
    for pat in &retrieval.matched_patterns {
        c.push(format!("pattern: {}", pat.describe()));
    }
    if c.is_empty() {
        c.push("(none)".to_string());
    }
    let mut t = Vec::new();
    for m in &trial.factors {
        let f = &m.factor;
        let effect = match f.effect {
            Some(Effect::ResponseRate(r)) => format!("response rate {:.0}%", r * 100.0),
            Some(Effect::HazardRatio(h)) => format!("HR {h}"),
            None => "direction only".to_string(),
        };
        let dir = match f.direction {
            Direction::Favorable => "favorable",
            Direction::Unfavorable => "unfavorable",
        };
        t.push(format!(
            "[factor:{}] {} {} -> {} {dir}, {effect} ({})",
            f.factor_id,
            f.field,
            f.condition.describe(),
            f.target,
            f.citation.source_tag
        ));
    }
    for pass in &trial.passages {
        let text: String = pass.chunk.text.split_whitespace().collect::<Vec<_>>().join(" ");
        t.push(format!("[trial:{}] ({}) {}", pass.chunk.chunk_id, pass.chunk.source_tag, text));
    }
    if t.is_empty() {
        t.push("(none)".to_string());
    }
    (p.join("\n"), c.join("\n"), t.join("\n"))
}

pub fn render_prompt(profile: &UnifiedProfile, retrieval: &RetrievalResult, trial: &TrialEvidence) -> String {
    let (p, c, t) = render_sections(profile, retrieval, trial);
    prompts::render(prompts::REASONING, &[("profile", &p), ("cases", &c), ("trial", &t)])
}

/// Maps a prompt tag such as `case:mem:p1` to a citation.
pub fn parse_tag(tag: &str) -> Option<Citation> {
    let tag = tag.trim().trim_start_matches('[').trim_end_matches(']');
    let (prefix, rest) = tag.split_once(':')?;
    let kind = [CitationKind::Profile, CitationKind::Case, CitationKind::Trial]
        .into_iter()
        .find(|k| k.tag_prefixes().contains(&prefix))?;
    (!rest.is_empty()).then(|| Citation::new(kind, rest))
}

#[derive(Deserialize)]
struct ModelPrediction {
    target: Target,
    label: bool,
    probability: f64,
    citations: Vec<String>,
    #[serde(default)]
    rationale: String,
}

#[derive(Deserialize)]
struct ModelAnswer {
    predictions: Vec<ModelPrediction>,
}

pub fn register_schemas(registry: &mut SchemaRegistry) {
    registry.register(SCHEMA_PREDICTION, |raw| {
        let (answer, value): (ModelAnswer, _) = parse_json_object(raw)?;
        let mut violations = Vec::new();
        for t in Target::ALL {
            if answer.predictions.iter().filter(|p| p.target == t).count() != 1 {
                violations.push(format!("exactly one prediction for {t}"));
            }
        }
        for p in &answer.predictions {
            if !(0.0..=1.0).contains(&p.probability) {
                violations.push(format!("{}: probability within [0,1]", p.target));
            }
            if p.citations.is_empty() {
                violations.push(format!("{}: citations non-empty", p.target));
            }
        }
        if violations.is_empty() {
            Ok(value)
        } else {
            Err(violations)
        }
    });
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReasoningError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("unresolved citations: {0:?}")]
    CitationFailure(Vec<String>),
}

/// What model mode produced: the predictions, how many gateway attempts
/// were spent and the error that forced a fallback, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelRun {
    pub predictions: Vec<Prediction>,
    pub attempts: u32,
    pub fallback: Option<ReasoningError>,
}

fn convert(
    patient_id: &str,
    answer: ModelAnswer,
    supplied: &BTreeSet<(CitationKind, String)>,
) -> Result<Vec<Prediction>, Vec<String>> {
    let mut out = Vec::new();
    let mut bad = Vec::new();
    for t in Target::ALL {
        let Some(mp) = answer.predictions.iter().find(|p| p.target == t) else {
            bad.push(format!("missing {t}"));
            continue;
        };
        let mut citations = Vec::new();
        for tag in &mp.citations {
            match parse_tag(tag) {
                Some(c) if supplied.contains(&c.key()) => {
                    if !citations.contains(&c) {
                        citations.push(c)
                    }
                }
                _ => bad.push(tag.clone()),
            }
        }
        out.push(Prediction {
            patient_id: patient_id.to_string(),
            target: t,
            label: mp.label,
            probability: mp.probability,
            mode: PredictionMode::Model,
            citations,
            rationale: mp.rationale.clone(),
            warnings: Vec::new(),
        });
    }
    if bad.is_empty() {
        Ok(out)
    } else {
        Err(bad)
    }
}

/// Model-backed predictions with one citation repair round, falling back
/// to the deterministic scorer.
pub fn model_predict(
    profile: &UnifiedProfile,
    retrieval: &RetrievalResult,
    trial: &TrialEvidence,
    priors: impl Fn(Target) -> Option<f64>,
    cfg: &ReasonConfig,
    gateway: &Gateway,
) -> ModelRun {
    let supplied = supplied_refs(profile, retrieval, trial);
    let prompt = render_prompt(profile, retrieval, trial);
    let mut attempts = 0;
    let mut request = PromptRequest::new(prompts::REASONING, prompt.clone());
    let mut last_error;
    let mut round = 0;
    loop {
        round += 1;
        match gateway.complete_structured(&request, SCHEMA_PREDICTION) {
            Ok(out) => {
                attempts += out.attempts;
                let answer: ModelAnswer = match serde_json::from_value(out.value) {
                    Ok(a) => a,
                    Err(e) => {
                        last_error = ReasoningError::Gateway(GatewayError::SchemaFailure {
                            template_id: prompts::REASONING.to_string(),
                            schema_id: SCHEMA_PREDICTION.to_string(),
                            attempts: out.attempts,
                            last_raw: out.raw,
                            violations: alloc::vec![e.to_string()],
                        });
                        break;
                    }
                };
                match convert(&profile.patient_id, answer, &supplied) {
                    Ok(predictions) => return ModelRun { predictions, attempts, fallback: None },
                    Err(bad) => {
                        let violations: Vec<String> = bad.iter().map(|t| format!("unknown citation tag {t}")).collect();
                        last_error = ReasoningError::CitationFailure(bad);
                        if round >= 2 {
                            break;
                        }
                        request = PromptRequest::new(prompts::REASONING, repair_prompt(&prompt, &out.raw, &violations));
                    }
                }
            }
            Err(e) => {
                if let GatewayError::SchemaFailure { attempts: a, .. } = &e {
                    attempts += a;
                }
                last_error = ReasoningError::Gateway(e);
                break;
            }
        }
    }
    ModelRun {
        predictions: deterministic_predictions(profile, retrieval, trial, priors, cfg),
        attempts,
        fallback: Some(last_error),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::domain::{ClinicalFeatures, Features, Outcome, PsmaExpression, RadiologyFeatures, TriState};
    use crate::evidence::FactorTable;
    use crate::gateway::{GatewayConfig, StubBackend};
    use crate::memory::MemoryStore;
    use core::sync::atomic::{AtomicU32, Ordering};
    use proptest::prelude::*;
    use std::sync::Arc;

    pub(crate) fn worked_profile() -> UnifiedProfile {
        let f = Features {
            radiology: RadiologyFeatures {
                psma_expression: PsmaExpression::High,
                bone_met: TriState::Yes,
                visceral_met: TriState::No,
                liver_met: TriState::No,
                lung_met: TriState::No,
                suv_max: Some(32.5),
                ..Default::default()
            },
            labs: crate::domain::LabFeatures { psa: Some(45.2), ..Default::default() },
            clinical: ClinicalFeatures {
                prior_adt: TriState::Yes,
                prior_chemo: TriState::Yes,
                chemo_lines: Some(1),
                ecog: Some(1),
                ..Default::default()
            },
        };
        UnifiedProfile::with_uniform_provenance("W0106", f, 0.9)
    }

    pub(crate) fn worked_memory() -> MemoryStore {
        let mut s = MemoryStore::new();
        for (i, psa) in [true, true, true, true, false].into_iter().enumerate() {
            let mut p = worked_profile();
            p.patient_id = format!("h{i}");
            s.add_case(p, Outcome { psa_response: psa, os_gt_12m: true }).unwrap();
        }
        s
    }

    fn factor_trial(profile: &UnifiedProfile) -> TrialEvidence {
        TrialEvidence { factors: FactorTable::shipped().matches(profile), passages: Vec::new() }
    }

    #[test]
    fn worked_positive_both_targets() {
        let p = worked_profile();
        let mem = worked_memory();
        let r = mem.retrieve_similar(&p, 5);
        assert_eq!(r.p_case[&Target::PsaResponse], 0.8);
        let trial = factor_trial(&p);
        let preds = deterministic_predictions(&p, &r, &trial, |t| mem.base_rate(t), &ReasonConfig::default());
        assert!(preds.iter().all(|p| p.label));
        let supplied = supplied_refs(&p, &r, &trial);
        for pred in &preds {
            assert!(pred.cites(CitationKind::Case) > 0 && pred.cites(CitationKind::Trial) > 0);
            assert!(validate_citations(pred, &supplied).is_ok());
        }
    }

    #[test]
    fn degenerate_inputs_give_half() {
        let p = UnifiedProfile { patient_id: "x".into(), ..Default::default() };
        let pred = deterministic_score(&p, &RetrievalResult::default(), &TrialEvidence::default(), None, Target::OsGt12m, &ReasonConfig::default());
        assert_eq!(pred.probability, 0.5);
        assert_eq!(pred.citations, alloc::vec![Citation::new(CitationKind::Profile, "patient_id")]);
        assert!(!pred.warnings.is_empty());
    }

    #[test]
    fn single_rate_factor_golden() {
        let mut f = Features::default();
        f.radiology.psma_expression = PsmaExpression::High;
        let p = UnifiedProfile::with_uniform_provenance("g", f, 1.0);
        let pred = deterministic_score(
            &p,
            &RetrievalResult::default(),
            &factor_trial(&p),
            Some(0.5),
            Target::PsaResponse,
            &ReasonConfig::default(),
        );
        // sigmoid(logit(0.5) + logit(0.66) - logit(0.5)) = 0.66
        assert!((pred.probability - 0.66).abs() < 1e-12, "{}", pred.probability);
    }

    #[test]
    fn validate_citation_cases() {
        let p = worked_profile();
        let supplied = supplied_refs(&p, &RetrievalResult::default(), &TrialEvidence::default());
        let mut pred = deterministic_score(&p, &RetrievalResult::default(), &TrialEvidence::default(), Some(0.4), Target::PsaResponse, &ReasonConfig::default());
        assert!(validate_citations(&pred, &supplied).is_ok());
        pred.citations.push(Citation::new(CitationKind::Trial, "ghost#0"));
        assert_eq!(validate_citations(&pred, &supplied).unresolved.len(), 1);
        pred.citations.clear();
        assert_eq!(validate_citations(&pred, &supplied).violations, ["citations non-empty"]);
    }

    #[test]
    fn tags_parse() {
        assert_eq!(parse_tag("case:mem:p1"), Some(Citation::new(CitationKind::Case, "mem:p1")));
        assert_eq!(parse_tag("[factor:F03]"), Some(Citation::new(CitationKind::Trial, "F03")));
        assert_eq!(parse_tag("trial:doc#0"), Some(Citation::new(CitationKind::Trial, "doc#0")));
        assert_eq!(parse_tag("profile:ecog"), Some(Citation::new(CitationKind::Profile, "ecog")));
        assert_eq!(parse_tag("wiki:x"), None);
    }

    fn gateway_with(handler: impl Fn(&str) -> String + Send + Sync + 'static) -> Gateway {
        Gateway::new(StubBackend::new().with_handler(prompts::REASONING, handler), crate::schemas::registry(), GatewayConfig::default())
    }

    fn scripted(case_tag: &str) -> String {
        format!(
            "{{\"predictions\": [\
             {{\"target\": \"psa_response\", \"label\": true, \"probability\": 0.8, \"citations\": [\"{case_tag}\", \"factor:F01\"], \"rationale\": \"4/5 similar cases achieved PSA response\"}},\
             {{\"target\": \"os_gt_12m\", \"label\": true, \"probability\": 0.75, \"citations\": [\"{case_tag}\", \"factor:F04\"], \"rationale\": \"no visceral disease\"}}]}}"
        )
    }

    #[test]
    fn model_mode_scripted_trace() {
        let p = worked_profile();
        let mem = worked_memory();
        let r = mem.retrieve_similar(&p, 5);
        let trial = factor_trial(&p);
        let gw = gateway_with(|_| scripted("case:mem:h0"));
        let run = model_predict(&p, &r, &trial, |t| mem.base_rate(t), &ReasonConfig::default(), &gw);
        assert!(run.fallback.is_none());
        assert_eq!(run.attempts, 1);
        assert_eq!(run.predictions.len(), 2);
        for pred in &run.predictions {
            assert_eq!(pred.mode, PredictionMode::Model);
            assert!(pred.cites(CitationKind::Case) == 1 && pred.cites(CitationKind::Trial) == 1);
        }
    }

    #[test]
    fn model_mode_repairs_citations_once() {
        let p = worked_profile();
        let mem = worked_memory();
        let r = mem.retrieve_similar(&p, 5);
        let trial = factor_trial(&p);
        let calls = Arc::new(AtomicU32::new(0));
        let c = calls.clone();
        let gw = gateway_with(move |prompt| {
            c.fetch_add(1, Ordering::SeqCst);
            if prompt.contains(crate::gateway::REPAIR_MARKER) {
                scripted("case:mem:h1")
            } else {
                scripted("case:mem:nobody")
            }
        });
        let run = model_predict(&p, &r, &trial, |t| mem.base_rate(t), &ReasonConfig::default(), &gw);
        assert_eq!(run.attempts, 2);
        assert!(run.fallback.is_none());
        assert!(run.predictions.iter().all(|p| p.mode == PredictionMode::Model));

        let gw = gateway_with(|_| scripted("case:mem:nobody"));
        let run = model_predict(&p, &r, &trial, |t| mem.base_rate(t), &ReasonConfig::default(), &gw);
        assert!(matches!(run.fallback, Some(ReasoningError::CitationFailure(_))));
        assert!(run.predictions.iter().all(|p| p.mode == PredictionMode::Deterministic));
    }

    #[test]
    fn model_mode_falls_back_on_garbage() {
        let p = worked_profile();
        let gw = gateway_with(|_| "I think yes".into());
        let run = model_predict(&p, &RetrievalResult::default(), &TrialEvidence::default(), |_| None, &ReasonConfig::default(), &gw);
        assert!(matches!(run.fallback, Some(ReasoningError::Gateway(GatewayError::SchemaFailure { .. }))));
        assert_eq!(run.predictions.len(), 2);
    }

    #[test]
    fn prompt_has_tagged_sections() {
        let p = worked_profile();
        let mem = worked_memory();
        let r = mem.retrieve_similar(&p, 5);
        let prompt = render_prompt(&p, &r, &factor_trial(&p));
        let cases = prompts::section(&prompt, "CASE EVIDENCE").unwrap();
        assert_eq!(cases.lines().filter(|l| l.starts_with("[case:")).count(), 5);
        let trial = prompts::section(&prompt, "TRIAL EVIDENCE").unwrap();
        assert!(trial.contains("[factor:F01]"));
        assert!(prompts::section(&prompt, "PROFILE").unwrap().contains("[profile:psma_expression] psma_expression: high"));
    }

    // --- formula properties ---

    pub(crate) fn arb_factor() -> impl Strategy<Value = PrognosticFactor> {
        let table = FactorTable::shipped();
        (0..table.factors.len(), prop::option::of(prop_oneof![
            (0.01f64..0.99).prop_map(Effect::ResponseRate),
            (0.1f64..5.0).prop_map(Effect::HazardRatio),
        ]), any::<bool>(), any::<bool>())
            .prop_map(move |(i, effect, keep, fav)| {
                let mut f = table.factors[i].clone();
                if !keep {
                    f.effect = effect;
                    f.direction = if fav { Direction::Favorable } else { Direction::Unfavorable };
                }
                f
            })
    }

    fn with_factors(factors: Vec<PrognosticFactor>) -> TrialEvidence {
        TrialEvidence {
            factors: factors.into_iter().map(|factor| FactorMatch { factor, observed: "x".into() }).collect(),
            passages: Vec::new(),
        }
    }

    fn retrieval_with(pos: u32, neg: u32) -> RetrievalResult {
        let mut s = MemoryStore::new();
        for i in 0..(pos + neg) {
            let mut p = worked_profile();
            p.patient_id = format!("r{i}");
            let y = i < pos;
            s.add_case(p, Outcome { psa_response: y, os_gt_12m: y }).unwrap();
        }
        s.retrieve_similar(&worked_profile(), (pos + neg).max(1) as usize)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn monotone_in_added_factor(
            base in prop::collection::vec(arb_factor(), 0..5),
            extra in arb_factor(),
            prior in prop::option::of(0.05f64..0.95),
            pos in 0u32..6, neg in 0u32..6,
            lambda in 0.0f64..2.0, delta in 0.0f64..1.0,
            psa in any::<bool>(),
        ) {
            let target = if psa { Target::PsaResponse } else { Target::OsGt12m };
            let p = worked_profile();
            let r = retrieval_with(pos, neg);
            let cfg = ReasonConfig { lambda, delta };
            let before = deterministic_score(&p, &r, &with_factors(base.clone()), prior, target, &cfg).probability;
            let mut more = base.clone();
            more.push(extra.clone());
            let after = deterministic_score(&p, &r, &with_factors(more), prior, target, &cfg).probability;
            match extra.direction {
                Direction::Favorable => prop_assert!(after >= before - 1e-12, "{} < {}", after, before),
                Direction::Unfavorable => prop_assert!(after <= before + 1e-12, "{} > {}", after, before),
            }
            prop_assert!(after > 0.0 && after < 1.0);
        }

        #[test]
        fn reductions_are_exact(
            factors in prop::collection::vec(arb_factor(), 0..5),
            prior in 0.05f64..0.95,
            pos in 0u32..6, neg in 1u32..6,
            lambda in 0.0f64..2.0, delta in 0.0f64..1.0,
        ) {
            let target = Target::OsGt12m;
            let p = worked_profile();
            let r = retrieval_with(pos, neg);
            let trial = with_factors(factors.clone());
            let zero = ReasonConfig { lambda: 0.0, delta };
            let no_cases = deterministic_score(&p, &RetrievalResult::default(), &trial, Some(prior), target, &zero);
            let lam0 = deterministic_score(&p, &r, &trial, Some(prior), target, &zero);
            prop_assert_eq!(lam0.probability, no_cases.probability);
            let sum: f64 = factors.iter().filter_map(|f| effect_term(f, target, prior, delta)).sum();
            prop_assert_eq!(lam0.probability, sigmoid(logit(prior) + sum));

            let cfg = ReasonConfig { lambda, delta };
            let only_cases = deterministic_score(&p, &r, &TrialEvidence::default(), Some(prior), target, &cfg);
            let p_tilde = (f64::from(pos) + 1.0) / (f64::from(pos + neg) + 2.0);
            let expected = sigmoid(logit(prior) + lambda * (logit(p_tilde) - logit(prior)));
            prop_assert_eq!(only_cases.probability, expected);
        }
    }
}
