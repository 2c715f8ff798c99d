//! Confidence-weighted consensus over the three expert outputs.
//!
//! Per field, candidates are the non-unknown values the experts report
//! (their own fragment plus cross observations). A single candidate value is
//! passed through. Differing values are resolved by higher confidence, then
//! by a fixed expert precedence for the field's group, and every such case
//! is recorded as a [`ConflictNote`].

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::format;

use serde::Deserialize;

use crate::domain::{
    ConflictCandidate, ConflictNote, ConflictRule, Expert, ExpertOutput, Features, Field, FieldGroup, FieldValue,
    Provenance, UnifiedProfile,
};
use crate::gateway::{parse_json_object, Gateway, PromptRequest, SchemaRegistry};
use crate::prompts;

pub const SCHEMA_ADJUDICATION: &str = "adjudication.v1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegrationMode {
    #[default]
    Deterministic,
    Model,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IntegrationError {
    #[error("expected exactly 3 expert outputs, got {0}")]
    Arity(usize),
    #[error("no output from {0}")]
    MissingExpert(Expert),
    #[error("{0} produced a fragment of the wrong kind")]
    FragmentMismatch(Expert),
}

/// Tie-break order among experts for a field.
pub fn precedence(field: Field) -> [Expert; 3] {
    match field.group() {
        FieldGroup::Imaging => [Expert::Radiologist, Expert::Biochemist, Expert::Oncologist],
        FieldGroup::Lab => [Expert::Biochemist, Expert::Oncologist, Expert::Radiologist],
        FieldGroup::Clinical => [Expert::Oncologist, Expert::Biochemist, Expert::Radiologist],
    }
}

#[derive(Clone, Debug)]
struct Candidate {
    expert: Expert,
    value: FieldValue,
    confidence: f64,
}

fn rank(field: Field, expert: Expert) -> usize {
    precedence(field).iter().position(|e| *e == expert).unwrap_or(usize::MAX)
}

/// Highest confidence first, then precedence.
fn deterministic_pick(field: Field, candidates: &[Candidate]) -> usize {
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let b = &candidates[best];
        if c.confidence > b.confidence || (c.confidence == b.confidence && rank(field, c.expert) < rank(field, b.expert)) {
            best = i;
        }
    }
    best
}

fn deterministic_rule(candidates: &[Candidate], winner: usize) -> ConflictRule {
    let w = &candidates[winner];
    let beaten = candidates
        .iter()
        .filter(|c| c.value != w.value)
        .all(|c| w.confidence > c.confidence);
    if beaten {
        ConflictRule::HigherConfidence
    } else {
        ConflictRule::ExpertPrecedence
    }
}

#[derive(Deserialize)]
struct Adjudication {
    expert: Expert,
}

pub fn register_schemas(registry: &mut SchemaRegistry) {
    registry.register(SCHEMA_ADJUDICATION, |raw| {
        parse_json_object::<Adjudication>(raw).map(|(_, v)| v)
    });
}

fn model_pick(field: Field, candidates: &[Candidate], gateway: &Gateway) -> Option<usize> {
    let listing = candidates
        .iter()
        .map(|c| format!("- {}, \"{}\", {:.2}", c.expert, c.value, c.confidence))
        .collect::<Vec<_>>()
        .join("\n");
    let prompt = prompts::render(prompts::INTEGRATOR, &[("field", field.name()), ("candidates", &listing)]);
    let request = PromptRequest::new(prompts::INTEGRATOR, prompt);
    let out = gateway.complete_structured(&request, SCHEMA_ADJUDICATION).ok()?;
    let choice: Adjudication = serde_json::from_value(out.value).ok()?;
    candidates.iter().position(|c| c.expert == choice.expert)
}

fn ordered(outputs: &[ExpertOutput]) -> Result<[&ExpertOutput; 3], IntegrationError> {
    if outputs.len() != 3 {
        return Err(IntegrationError::Arity(outputs.len()));
    }
    let find = |e: Expert| {
        let mut it = outputs.iter().filter(|o| o.expert == e);
        match (it.next(), it.next()) {
            (Some(o), None) if o.fragment.matches(e) => Ok(o),
            (Some(_), None) => Err(IntegrationError::FragmentMismatch(e)),
            _ => Err(IntegrationError::MissingExpert(e)),
        }
    };
    Ok([find(Expert::Radiologist)?, find(Expert::Biochemist)?, find(Expert::Oncologist)?])
}

/// Merges expert outputs into one profile. In model mode the gateway
/// adjudicates conflicts; any gateway failure falls back to the
/// deterministic rule.
pub fn integrate(
    patient_id: &str,
    outputs: &[ExpertOutput],
    mode: IntegrationMode,
    gateway: Option<&Gateway>,
) -> Result<UnifiedProfile, IntegrationError> {
    let experts = ordered(outputs)?;
    let observed: Vec<(&ExpertOutput, Features)> = experts.iter().map(|o| (*o, o.observed())).collect();
    let mut profile = UnifiedProfile { patient_id: patient_id.to_string(), ..Default::default() };

    for field in Field::ALL {
        let candidates: Vec<Candidate> = observed
            .iter()
            .filter_map(|(o, f)| {
                f.get(field).map(|value| Candidate {
                    expert: o.expert,
                    value,
                    confidence: o.field_confidence(field),
                })
            })
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let disagreement = candidates.iter().any(|c| c.value != candidates[0].value);
        let (winner, rule) = if !disagreement {
            (deterministic_pick(field, &candidates), None)
        } else {
            let model_choice = match (mode, gateway) {
                (IntegrationMode::Model, Some(gw)) => model_pick(field, &candidates, gw),
                _ => None,
            };
            match model_choice {
                Some(i) => (i, Some(ConflictRule::EvidenceReview)),
                None => {
                    let i = deterministic_pick(field, &candidates);
                    (i, Some(deterministic_rule(&candidates, i)))
                }
            }
        };
        let w = &candidates[winner];
        profile.features.set(field, w.value.clone());
        profile
            .provenance
            .insert(field, Provenance { expert: w.expert, confidence: w.confidence });
        if let Some(rule) = rule {
            profile.conflicts.push(ConflictNote {
                field,
                candidates: candidates
                    .iter()
                    .map(|c| ConflictCandidate { expert: c.expert, value: c.value.to_string(), confidence: c.confidence })
                    .collect(),
                resolution: w.value.to_string(),
                rule,
            });
        }
    }
    Ok(profile)
}

/// Mean provenance confidence over known fields; 0 when nothing is known.
pub fn overall_confidence(profile: &UnifiedProfile) -> f64 {
    let confs: Vec<f64> = profile
        .features
        .known_fields()
        .filter_map(|f| profile.provenance.get(&f).map(|p| p.confidence))
        .collect();
    if confs.is_empty() {
        0.0
    } else {
        confs.iter().sum::<f64>() / confs.len() as f64
    }
}

/// Builds a profile from one combined extraction (multi-expert ablation).
/// Fields are attributed to the expert that would normally own them.
pub fn from_single_extractor(patient_id: &str, features: Features, confidence: f64) -> UnifiedProfile {
    UnifiedProfile::with_uniform_provenance(patient_id, features, confidence)
}

/// One-line rendering of a conflict note for logs.
pub fn describe(note: &ConflictNote) -> String {
    let parts: Vec<String> = note
        .candidates
        .iter()
        .map(|c| format!("{}={}@{:.2}", c.expert, c.value, c.confidence))
        .collect();
    format!("{}: {} -> {} ({:?})", note.field, parts.join(", "), note.resolution, note.rule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{validate_profile, ClinicalFeatures, Fragment, LabFeatures, PsmaExpression, RadiologyFeatures, TriState};
    use crate::gateway::{GatewayConfig, StubBackend};
    use proptest::prelude::*;

    fn outputs(psa_bio: Option<(f64, f64)>, psa_onc: Option<(f64, f64)>) -> Vec<ExpertOutput> {
        let mut rad = ExpertOutput::empty(Expert::Radiologist, "");
        rad.fragment = Fragment::Radiology(RadiologyFeatures {
            psma_expression: PsmaExpression::High,
            bone_met: TriState::Yes,
            ..Default::default()
        });
        rad.confidence = 0.8;
        let mut bio = ExpertOutput::empty(Expert::Biochemist, "");
        let mut onc = ExpertOutput::empty(Expert::Oncologist, "");
        onc.fragment = Fragment::Clinical(ClinicalFeatures { ecog: Some(1), ..Default::default() });
        onc.confidence = 0.6;
        if let Some((v, c)) = psa_bio {
            bio.fragment = Fragment::Labs(LabFeatures { psa: Some(v), ..Default::default() });
            bio.confidence = c;
        }
        if let Some((v, c)) = psa_onc {
            onc.cross_observations.labs.psa = Some(v);
            onc.confidence = c;
        }
        vec![rad, bio, onc]
    }

    #[test]
    fn disjoint_fragments_pass_through() {
        let p = integrate("p", &outputs(Some((45.2, 0.9)), None), IntegrationMode::Deterministic, None).unwrap();
        assert!(p.conflicts.is_empty());
        assert_eq!(p.labs().psa, Some(45.2));
        assert_eq!(p.radiology().psma_expression, PsmaExpression::High);
        assert_eq!(p.clinical().ecog, Some(1));
        assert!(validate_profile(&p).is_ok());
    }

    #[test]
    fn higher_confidence_wins() {
        let p = integrate("p", &outputs(Some((45.2, 0.9)), Some((50.0, 0.4))), IntegrationMode::Deterministic, None).unwrap();
        assert_eq!(p.labs().psa, Some(45.2));
        assert_eq!(p.conflicts.len(), 1);
        assert_eq!(p.conflicts[0].rule, ConflictRule::HigherConfidence);
        assert_eq!(p.conflicts[0].resolution, "45.2");
    }

    #[test]
    fn tie_goes_to_biochemist_for_lab_fields() {
        let p = integrate("p", &outputs(Some((45.2, 0.7)), Some((50.0, 0.7))), IntegrationMode::Deterministic, None).unwrap();
        assert_eq!(p.labs().psa, Some(45.2));
        assert_eq!(p.conflicts[0].rule, ConflictRule::ExpertPrecedence);
        assert_eq!(p.provenance[&Field::Psa].expert, Expert::Biochemist);
    }

    #[test]
    fn agreeing_values_are_not_conflicts() {
        let p = integrate("p", &outputs(Some((45.2, 0.7)), Some((45.2, 0.9))), IntegrationMode::Deterministic, None).unwrap();
        assert!(p.conflicts.is_empty());
        assert_eq!(p.provenance[&Field::Psa].expert, Expert::Oncologist);
    }

    #[test]
    fn unknown_never_overrides() {
        let p = integrate("p", &outputs(None, Some((50.0, 0.1))), IntegrationMode::Deterministic, None).unwrap();
        assert_eq!(p.labs().psa, Some(50.0));
    }

    #[test]
    fn arity_is_checked() {
        let mut o = outputs(None, None);
        o.pop();
        assert_eq!(integrate("p", &o, IntegrationMode::Deterministic, None), Err(IntegrationError::Arity(2)));
        let mut o = outputs(None, None);
        o[2] = ExpertOutput::empty(Expert::Biochemist, "");
        assert_eq!(
            integrate("p", &o, IntegrationMode::Deterministic, None),
            Err(IntegrationError::MissingExpert(Expert::Biochemist))
        );
        let mut o = outputs(None, None);
        o[0].fragment = Fragment::empty_for(Expert::Oncologist);
        assert_eq!(
            integrate("p", &o, IntegrationMode::Deterministic, None),
            Err(IntegrationError::FragmentMismatch(Expert::Radiologist))
        );
    }

    #[test]
    fn model_mode_adjudicates_and_falls_back() {
        let gw = Gateway::new(
            StubBackend::new().with_handler(prompts::INTEGRATOR, |_| "{\"expert\": \"oncologist\"}".into()),
            crate::schemas::registry(),
            GatewayConfig::default(),
        );
        let o = outputs(Some((45.2, 0.9)), Some((50.0, 0.4)));
        let p = integrate("p", &o, IntegrationMode::Model, Some(&gw)).unwrap();
        assert_eq!(p.labs().psa, Some(50.0));
        assert_eq!(p.conflicts[0].rule, ConflictRule::EvidenceReview);

        let broken = Gateway::new(
            StubBackend::new().with_handler(prompts::INTEGRATOR, |_| "no idea".into()),
            crate::schemas::registry(),
            GatewayConfig::default(),
        );
        let p = integrate("p", &o, IntegrationMode::Model, Some(&broken)).unwrap();
        assert_eq!(p.labs().psa, Some(45.2));
        assert_eq!(p.conflicts[0].rule, ConflictRule::HigherConfidence);
    }

    #[test]
    fn overall_confidence_cases() {
        let mut f = Features::default();
        f.labs.psa = Some(1.0);
        f.clinical.ecog = Some(1);
        let mut p = UnifiedProfile::with_uniform_provenance("p", f.clone(), 1.0);
        assert_eq!(overall_confidence(&p), 1.0);
        p.provenance.get_mut(&Field::Psa).unwrap().confidence = 0.8;
        p.provenance.get_mut(&Field::Ecog).unwrap().confidence = 0.4;
        assert!((overall_confidence(&p) - 0.6).abs() < 1e-12);
        assert_eq!(overall_confidence(&UnifiedProfile::default()), 0.0);
    }

    fn arb_conf() -> impl Strategy<Value = f64> {
        (0u8..=10).prop_map(|n| f64::from(n) / 10.0)
    }

    proptest! {
        #[test]
        fn permutation_and_conflict_completeness(
            bio in proptest::option::of((0u8..3, arb_conf())),
            onc in proptest::option::of((0u8..3, arb_conf())),
            rad in proptest::option::of((0u8..3, arb_conf())),
            perm in 0usize..6,
        ) {
            let mut o = outputs(bio.map(|(v, c)| (f64::from(v), c)), onc.map(|(v, c)| (f64::from(v), c)));
            if let Some((v, c)) = rad {
                o[0].cross_observations.labs.psa = Some(f64::from(v));
                o[0].confidence = c;
            }
            let base = integrate("p", &o, IntegrationMode::Deterministic, None).unwrap();
            let orders = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let shuffled: Vec<ExpertOutput> = orders[perm].iter().map(|i| o[*i].clone()).collect();
            let again = integrate("p", &shuffled, IntegrationMode::Deterministic, None).unwrap();
            prop_assert_eq!(&base, &again);

            let values: Vec<f64> = [bio, onc, rad].iter().flatten().map(|(v, _)| f64::from(*v)).collect();
            let differing = values.iter().any(|v| *v != values[0]);
            let notes = base.conflicts.iter().filter(|n| n.field == Field::Psa).count();
            prop_assert_eq!(notes, usize::from(differing));
            prop_assert_eq!(base.labs().psa.is_some(), !values.is_empty());
            prop_assert!(validate_profile(&base).is_ok());
        }
    }
}
