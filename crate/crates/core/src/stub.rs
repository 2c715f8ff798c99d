//! Rule-driven stand-ins for every prompt template, so Model mode runs
//! offline and deterministically.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::Serialize;
use serde_json::{json, Value};

use crate::domain::{Expert, Target};
use crate::evidence::FactorTable;
use crate::extraction::parse_template_document;
use crate::gateway::StubBackend;
use crate::math::{logit, sigmoid};
use crate::reasoning::{effect_term, DEFAULT_DELTA};
use crate::{prompts, rules};

fn with_confidence<T: Serialize>(features: &T, confidence: f64) -> String {
    let mut v = serde_json::to_value(features).unwrap_or(Value::Null);
    if let Value::Object(m) = &mut v {
        m.insert("confidence".into(), json!(confidence));
    }
    v.to_string()
}

fn expert_answer(expert: Expert, prompt: &str) -> String {
    let doc = prompts::embedded_document(prompt).unwrap_or(prompt);
    if let Ok(parsed) = parse_template_document(doc) {
        let f = parsed.features;
        let known = expert.owned_fields().iter().filter(|x| f.get(**x).is_some()).count();
        let conf = known as f64 / expert.owned_fields().len() as f64;
        return match expert {
            Expert::Radiologist => with_confidence(&f.radiology, conf),
            Expert::Biochemist => with_confidence(&f.labs, conf),
            Expert::Oncologist => with_confidence(&f.clinical, conf),
        };
    }
    match expert {
        Expert::Radiologist => {
            let r = rules::radiology(doc);
            with_confidence(&r.features, r.confidence())
        }
        Expert::Biochemist => {
            let r = rules::labs(doc);
            with_confidence(&r.features, r.confidence())
        }
        Expert::Oncologist => {
            let r = rules::clinical(doc);
            with_confidence(&r.features, r.confidence())
        }
    }
}

fn generalist_answer(prompt: &str) -> String {
    let doc = prompts::embedded_document(prompt).unwrap_or(prompt);
    if let Ok(parsed) = parse_template_document(doc) {
        let n = parsed.features.known_fields().count();
        return with_confidence(&parsed.features, n as f64 / 19.0);
    }
    let (f, c) = rules::combined(doc);
    with_confidence(&f, c)
}

/// Picks the most confident candidate; the first listed wins ties.
fn integrator_answer(prompt: &str) -> String {
    let mut best: Option<(String, f64)> = None;
    for line in prompt.lines().filter_map(|l| l.strip_prefix("- ")) {
        let mut parts = line.split(", ");
        let (Some(expert), Some(conf)) = (parts.next(), line.rsplit(", ").next()) else {
            continue;
        };
        let Ok(conf) = conf.trim().parse::<f64>() else {
            continue;
        };
        if best.as_ref().is_none_or(|(_, c)| conf > *c) {
            best = Some((expert.trim().to_string(), conf));
        }
    }
    let expert = best.map(|b| b.0).unwrap_or_else(|| "radiologist".into());
    json!({"expert": expert, "reason": "higher stated confidence"}).to_string()
}

fn tag_of(line: &str) -> Option<&str> {
    let rest = line.strip_prefix('[')?;
    Some(&rest[..rest.find(']')?])
}

/// Reads the tagged prompt sections back and applies the additive scorer
/// with a flat prior, citing everything it used.
fn reasoning_answer(prompt: &str) -> String {
    let table = FactorTable::shipped();
    let cases = prompts::section(prompt, "CASE EVIDENCE").unwrap_or("");
    let trial = prompts::section(prompt, "TRIAL EVIDENCE").unwrap_or("");

    let mut predictions = Vec::new();
    for target in Target::ALL {
        let mut z = 0.0;
        let mut cites: BTreeSet<String> = BTreeSet::new();
        let mut notes = Vec::new();
        for line in trial.lines() {
            let Some(tag) = tag_of(line) else { continue };
            if let Some(id) = tag.strip_prefix("factor:") {
                if let Some(f) = table.get(id) {
                    if let Some(e) = effect_term(f, target, 0.5, DEFAULT_DELTA) {
                        z += e;
                        cites.insert(tag.to_string());
                        cites.insert(format!("profile:{}", f.field));
                        notes.push(format!("{id} {e:+.2}"));
                    }
                }
            }
        }
        let (mut pos, mut n) = (0u32, 0u32);
        let key = format!("{}=", target.as_str());
        for line in cases.lines() {
            let Some(tag) = tag_of(line) else { continue };
            if let Some(at) = line.find(&key) {
                n += 1;
                if line[at + key.len()..].starts_with("yes") {
                    pos += 1;
                }
                cites.insert(tag.to_string());
            }
        }
        if n > 0 {
            z += logit((f64::from(pos) + 1.0) / (f64::from(n) + 2.0));
            notes.push(format!("{pos}/{n} similar cases positive"));
        }
        if cites.is_empty() {
            cites.insert("profile:patient_id".into());
            notes.push("no usable evidence".into());
        }
        let p = sigmoid(z);
        predictions.push(json!({
            "target": target.as_str(),
            "label": p >= 0.5,
            "probability": p,
            "citations": cites.into_iter().collect::<Vec<_>>(),
            "rationale": notes.join("; "),
        }));
    }
    json!({ "predictions": predictions }).to_string()
}

/// A stub backend answering every shipped template.
pub fn rule_backend() -> StubBackend {
    StubBackend::new()
        .with_handler(prompts::RADIOLOGIST, |p| expert_answer(Expert::Radiologist, p))
        .with_handler(prompts::BIOCHEMIST, |p| expert_answer(Expert::Biochemist, p))
        .with_handler(prompts::ONCOLOGIST, |p| expert_answer(Expert::Oncologist, p))
        .with_handler(prompts::GENERALIST, generalist_answer)
        .with_handler(prompts::INTEGRATOR, integrator_answer)
        .with_handler(prompts::REASONING, reasoning_answer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrator_picks_highest() {
        let p = prompts::render(
            prompts::INTEGRATOR,
            &[("field", "psa"), ("candidates", "- biochemist, \"45.2\", 0.60\n- oncologist, \"50\", 0.90")],
        );
        assert!(integrator_answer(&p).contains("\"oncologist\""));
    }

    #[test]
    fn reasoning_stub_cites_sources() {
        let p = prompts::render(
            prompts::REASONING,
            &[
                ("profile", "[profile:patient_id] patient_id: x\n[profile:liver_met] liver_met: yes"),
                ("cases", "[case:mem:a] similarity 0.9; psa_response=yes os_gt_12m=no"),
                ("trial", "[factor:F03] liver_met = yes -> os_gt_12m unfavorable, HR 2.1 (VISION)"),
            ],
        );
        let v: Value = serde_json::from_str(&reasoning_answer(&p)).unwrap();
        let os = &v["predictions"][1];
        assert_eq!(os["target"], "os_gt_12m");
        assert_eq!(os["label"], false);
        let cites: Vec<&str> = os["citations"].as_array().unwrap().iter().map(|c| c.as_str().unwrap()).collect();
        assert_eq!(cites, ["case:mem:a", "factor:F03", "profile:liver_met"]);
    }
}
