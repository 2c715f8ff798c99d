//! The three expert extractors.
//!
//! Each extractor has two paths. `Model` renders the expert's prompt
//! template and asks the gateway for a schema-bound fragment. `Deterministic`
//! reads documents written with the synthetic template grammar and refuses
//! anything else.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};

use serde::Deserialize;
use serde_json::Value;

use crate::domain::{
    clear_field, validate_features, ClinicalFeatures, Expert, ExpertOutput, Features, Field, Fragment,
    LabFeatures, PatientRecord, RadiologyFeatures,
};
use crate::gateway::{parse_json_object, Gateway, GatewayError, PromptRequest, SchemaRegistry};
use crate::grammar::{self, DocKind, Slot};
use crate::prompts;

pub const SCHEMA_RADIOLOGY: &str = "radiology.v1";
pub const SCHEMA_LABS: &str = "labs.v1";
pub const SCHEMA_CLINICAL: &str = "clinical.v1";
pub const SCHEMA_PROFILE: &str = "profile.v1";

/// Confidence assumed when a model omits its own.
pub const DEFAULT_MODEL_CONFIDENCE: f64 = 0.5;

/// Languages the extraction prompts are written for.
pub const FAMILIAR_LANGUAGES: &[&str] = &["en", "de", "fr", "it"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractionMode {
    Model,
    #[default]
    Deterministic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub mode: ExtractionMode,
    pub language_fallback: bool,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig { mode: ExtractionMode::Deterministic, language_fallback: true }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExtractionError {
    #[error("{expert}: {source}")]
    Gateway { expert: Expert, source: GatewayError },
    #[error("{expert}: template grammar failed on {field} in line {line:?}: {reason}")]
    DeterministicParse { expert: Expert, field: Field, line: String, reason: String },
    #[error("{expert}: deterministic mode needs a template document (sentinel header missing)")]
    NotTemplateDocument { expert: Expert },
    #[error("{expert}: language {hint:?} is not supported and fallback is disabled")]
    UnsupportedLanguage { expert: Expert, hint: String },
    #[error("{expert}: document is empty")]
    EmptyDocument { expert: Expert },
}

/// Result of parsing a template document: every fact found, plus the raw
/// slot value each fact was read from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedDocument {
    pub features: Features,
    pub groundings: Vec<(Field, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TemplateError {
    NoSentinel,
    Malformed { field: Field, line: String, reason: String },
}

/// Reads every slot line of a template document.
pub fn parse_template_document(text: &str) -> Result<ParsedDocument, TemplateError> {
    if !grammar::has_sentinel(text) {
        return Err(TemplateError::NoSentinel);
    }
    let all: Vec<Slot> = [grammar::PET_SLOTS, grammar::LAB_SLOTS, grammar::NOTE_SLOTS]
        .iter()
        .flat_map(|s| s.iter().copied())
        .collect();
    let mut parsed = ParsedDocument::default();
    for line in text.lines() {
        let Some((slot, raw)) = grammar::match_line(line, &all) else {
            continue;
        };
        let Some(field) = slot.field else {
            continue;
        };
        let malformed = |reason: String| TemplateError::Malformed { field, line: line.trim().to_string(), reason };
        let value = grammar::parse_value(field, &raw).map_err(malformed)?;
        let Some(value) = value else {
            continue;
        };
        if let Some(existing) = parsed.features.get(field) {
            if existing != value {
                return Err(malformed(format!("contradicts earlier value {existing}")));
            }
            continue;
        }
        parsed.features.set(field, value);
        parsed.groundings.push((field, raw));
    }
    Ok(parsed)
}

fn split_observed(expert: Expert, features: Features) -> (Fragment, Features) {
    let mut cross = features.clone();
    for f in expert.owned_fields() {
        clear_field(&mut cross, *f);
    }
    let fragment = match expert {
        Expert::Radiologist => Fragment::Radiology(features.radiology),
        Expert::Biochemist => Fragment::Labs(features.labs),
        Expert::Oncologist => Fragment::Clinical(features.clinical),
    };
    (fragment, cross)
}

fn grounded_fraction(expert: Expert, features: &Features) -> f64 {
    let owned = expert.owned_fields();
    let known = owned.iter().filter(|f| features.get(**f).is_some()).count();
    known as f64 / owned.len() as f64
}

fn deterministic(expert: Expert, document: &str) -> Result<ExpertOutput, ExtractionError> {
    let parsed = parse_template_document(document).map_err(|e| match e {
        TemplateError::NoSentinel => ExtractionError::NotTemplateDocument { expert },
        TemplateError::Malformed { field, line, reason } => {
            ExtractionError::DeterministicParse { expert, field, line, reason }
        }
    })?;
    let confidence = grounded_fraction(expert, &parsed.features);
    let (fragment, cross_observations) = split_observed(expert, parsed.features);
    Ok(ExpertOutput {
        expert,
        fragment,
        confidence,
        field_confidences: None,
        notes: String::from("template grammar"),
        cross_observations,
    })
}

pub fn template_id(expert: Expert) -> &'static str {
    match expert {
        Expert::Radiologist => prompts::RADIOLOGIST,
        Expert::Biochemist => prompts::BIOCHEMIST,
        Expert::Oncologist => prompts::ONCOLOGIST,
    }
}

pub fn schema_id(expert: Expert) -> &'static str {
    match expert {
        Expert::Radiologist => SCHEMA_RADIOLOGY,
        Expert::Biochemist => SCHEMA_LABS,
        Expert::Oncologist => SCHEMA_CLINICAL,
    }
}

#[derive(Deserialize)]
struct ModelAnswer<T> {
    #[serde(flatten)]
    features: T,
    #[serde(default)]
    confidence: Option<f64>,
}

fn clamp_confidence(c: Option<f64>) -> f64 {
    match c {
        Some(v) if v.is_finite() => v.clamp(0.0, 1.0),
        _ => DEFAULT_MODEL_CONFIDENCE,
    }
}

fn feature_violations(features: &Features) -> Vec<String> {
    validate_features(features)
        .violations
        .into_iter()
        .map(|v| match v.field {
            Some(f) => format!("{f}: {}", v.rule),
            None => v.rule,
        })
        .collect()
}

fn check_answer<T, F>(raw: &str, lift: F) -> Result<Value, Vec<String>>
where
    T: serde::de::DeserializeOwned,
    F: Fn(T) -> Features,
{
    let (answer, value): (ModelAnswer<T>, Value) = parse_json_object(raw)?;
    let violations = feature_violations(&lift(answer.features));
    if violations.is_empty() {
        Ok(value)
    } else {
        Err(violations)
    }
}

/// Registers the expert and generalist response schemas.
pub fn register_schemas(registry: &mut SchemaRegistry) {
    registry.register(SCHEMA_RADIOLOGY, |raw| {
        check_answer(raw, |r: RadiologyFeatures| Features { radiology: r, ..Default::default() })
    });
    registry.register(SCHEMA_LABS, |raw| {
        check_answer(raw, |l: LabFeatures| Features { labs: l, ..Default::default() })
    });
    registry.register(SCHEMA_CLINICAL, |raw| {
        check_answer(raw, |c: ClinicalFeatures| Features { clinical: c, ..Default::default() })
    });
    registry.register(SCHEMA_PROFILE, |raw| check_answer(raw, |f: Features| f));
}

fn model(expert: Expert, document: &str, gateway: &Gateway) -> Result<ExpertOutput, ExtractionError> {
    let id = template_id(expert);
    let prompt = prompts::render(id, &[("document", document)]);
    let request = PromptRequest::new(id, prompt);
    let out = gateway
        .complete_structured(&request, schema_id(expert))
        .map_err(|source| ExtractionError::Gateway { expert, source })?;
    let bad_shape = |e: serde_json::Error| ExtractionError::Gateway {
        expert,
        source: GatewayError::SchemaFailure {
            template_id: id.to_string(),
            schema_id: schema_id(expert).to_string(),
            attempts: out.attempts,
            last_raw: out.raw.clone(),
            violations: vec![e.to_string()],
        },
    };
    let (fragment, confidence) = match expert {
        Expert::Radiologist => {
            let a: ModelAnswer<RadiologyFeatures> = serde_json::from_value(out.value.clone()).map_err(bad_shape)?;
            (Fragment::Radiology(a.features), a.confidence)
        }
        Expert::Biochemist => {
            let a: ModelAnswer<LabFeatures> = serde_json::from_value(out.value.clone()).map_err(bad_shape)?;
            (Fragment::Labs(a.features), a.confidence)
        }
        Expert::Oncologist => {
            let a: ModelAnswer<ClinicalFeatures> = serde_json::from_value(out.value.clone()).map_err(bad_shape)?;
            (Fragment::Clinical(a.features), a.confidence)
        }
    };
    Ok(ExpertOutput {
        expert,
        fragment,
        confidence: clamp_confidence(confidence),
        field_confidences: None,
        notes: format!("{} attempt(s)", out.attempts),
        cross_observations: Features::default(),
    })
}

/// Runs one expert over its document. An empty document yields an
/// all-unknown fragment at confidence 0.
pub fn extract(expert: Expert, document: &str, cfg: &ExtractionConfig, gateway: &Gateway) -> Result<ExpertOutput, ExtractionError> {
    if document.trim().is_empty() {
        return Ok(ExpertOutput::empty(expert, "no document"));
    }
    match cfg.mode {
        ExtractionMode::Deterministic => deterministic(expert, document),
        ExtractionMode::Model => model(expert, document, gateway),
    }
}

pub fn extract_radiology(pet_report: &str, cfg: &ExtractionConfig, gateway: &Gateway) -> Result<ExpertOutput, ExtractionError> {
    extract(Expert::Radiologist, pet_report, cfg, gateway)
}

pub fn extract_labs(lab_report: &str, cfg: &ExtractionConfig, gateway: &Gateway) -> Result<ExpertOutput, ExtractionError> {
    extract(Expert::Biochemist, lab_report, cfg, gateway)
}

pub fn extract_clinical(notes: &str, cfg: &ExtractionConfig, gateway: &Gateway) -> Result<ExpertOutput, ExtractionError> {
    extract(Expert::Oncologist, notes, cfg, gateway)
}

/// Outputs of all three experts in fixed order plus any per-expert errors.
/// A failed expert contributes an all-unknown output at confidence 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractionSet {
    pub outputs: Vec<ExpertOutput>,
    pub errors: Vec<ExtractionError>,
}

fn language_check(record: &PatientRecord, cfg: &ExtractionConfig) -> Option<String> {
    let hint = record.language_hint.as_deref()?;
    let familiar = FAMILIAR_LANGUAGES.iter().any(|l| hint.eq_ignore_ascii_case(l));
    (!familiar && !cfg.language_fallback).then(|| hint.to_string())
}

/// Assembles per-expert results in Radiologist, Biochemist, Oncologist
/// order regardless of the order they were produced in.
pub fn assemble(mut results: Vec<(Expert, Result<ExpertOutput, ExtractionError>)>) -> ExtractionSet {
    results.sort_by_key(|(e, _)| *e);
    let mut outputs = Vec::with_capacity(3);
    let mut errors = Vec::new();
    for expert in Expert::ALL {
        match results.iter().position(|(e, _)| *e == expert) {
            Some(i) => match results.remove(i).1 {
                Ok(out) => outputs.push(out),
                Err(err) => {
                    outputs.push(ExpertOutput::empty(expert, &err.to_string()));
                    errors.push(err);
                }
            },
            None => outputs.push(ExpertOutput::empty(expert, "not run")),
        }
    }
    ExtractionSet { outputs, errors }
}

/// Runs the three experts one after another. The `theraloop` crate offers
/// a threaded variant with identical output.
pub fn extract_all(record: &PatientRecord, cfg: &ExtractionConfig, gateway: &Gateway) -> ExtractionSet {
    if let Some(hint) = language_check(record, cfg) {
        let results = Expert::ALL
            .into_iter()
            .map(|e| (e, Err(ExtractionError::UnsupportedLanguage { expert: e, hint: hint.clone() })))
            .collect();
        return assemble(results);
    }
    let results = Expert::ALL
        .into_iter()
        .map(|e| (e, extract(e, record.document(e), cfg, gateway)))
        .collect();
    assemble(results)
}

/// Language gate shared with the threaded variant.
pub fn unsupported_language(record: &PatientRecord, cfg: &ExtractionConfig) -> Option<String> {
    language_check(record, cfg)
}

/// Single-extractor path used when the multi-expert stage is ablated: one
/// pass over the concatenated documents.
pub fn extract_combined(record: &PatientRecord, cfg: &ExtractionConfig, gateway: &Gateway) -> Result<(Features, f64), ExtractionError> {
    let combined = [&record.pet_report, &record.lab_report, &record.clinical_notes]
        .iter()
        .filter(|d| !d.trim().is_empty())
        .map(|d| d.as_str())
        .collect::<Vec<_>>()
        .join("\n\n");
    // errors from the single extractor are attributed to the radiologist slot
    let expert = Expert::Radiologist;
    if combined.trim().is_empty() {
        return Ok((Features::default(), 0.0));
    }
    match cfg.mode {
        ExtractionMode::Deterministic => {
            let parsed = parse_template_document(&combined).map_err(|e| match e {
                TemplateError::NoSentinel => ExtractionError::NotTemplateDocument { expert },
                TemplateError::Malformed { field, line, reason } => {
                    ExtractionError::DeterministicParse { expert, field, line, reason }
                }
            })?;
            let known = parsed.features.known_fields().count();
            Ok((parsed.features, known as f64 / Field::ALL.len() as f64))
        }
        ExtractionMode::Model => {
            let prompt = prompts::render(prompts::GENERALIST, &[("document", &combined)]);
            let request = PromptRequest::new(prompts::GENERALIST, prompt);
            let out = gateway
                .complete_structured(&request, SCHEMA_PROFILE)
                .map_err(|source| ExtractionError::Gateway { expert, source })?;
            let answer: ModelAnswer<Features> = serde_json::from_value(out.value).map_err(|e| ExtractionError::Gateway {
                expert,
                source: GatewayError::SchemaFailure {
                    template_id: prompts::GENERALIST.to_string(),
                    schema_id: SCHEMA_PROFILE.to_string(),
                    attempts: out.attempts,
                    last_raw: out.raw,
                    violations: vec![e.to_string()],
                },
            })?;
            Ok((answer.features, clamp_confidence(answer.confidence)))
        }
    }
}

/// Which document kind each expert reads.
pub fn doc_kind(expert: Expert) -> DocKind {
    match expert {
        Expert::Radiologist => DocKind::Pet,
        Expert::Biochemist => DocKind::Labs,
        Expert::Oncologist => DocKind::Notes,
    }
}
