//! Keyword rules over free-text clinical documents.
//!
//! These back the default stub handlers for the expert templates so the
//! model-mode code path runs offline. They only report what a phrase in the
//! text states; anything not mentioned stays unknown.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::domain::{
    ClinicalFeatures, Features, LabFeatures, PsaTrend, PsmaExpression, RadiologyFeatures, TriState,
    TumorBurden,
};
use crate::units::{self, Analyte};

/// Sentences of `text`, lower-cased, split on `.`, `;` and newlines.
/// Decimal points between digits do not split.
fn sentences(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let decimal = c == '.'
            && i > 0
            && chars[i - 1].is_ascii_digit()
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if (c == '.' || c == ';' || c == '\n') && !decimal {
            if !cur.trim().is_empty() {
                out.push(cur.trim().to_string());
            }
            cur.clear();
        } else {
            cur.push(c);
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn any(s: &str, needles: &[&str]) -> bool {
    needles.iter().any(|n| s.contains(n))
}

/// Tri-state from negated/affirmed phrase lists, negation checked first.
fn tri(sents: &[String], negated: &[&str], affirmed: &[&str]) -> TriState {
    if sents.iter().any(|s| any(s, negated)) {
        TriState::No
    } else if sents.iter().any(|s| any(s, affirmed)) {
        TriState::Yes
    } else {
        TriState::Unknown
    }
}

/// The number following the first occurrence of any keyword in a sentence,
/// read through `units::parse_quantity`.
fn quantity_after(sents: &[String], keywords: &[&str], analyte: Analyte) -> Option<f64> {
    for s in sents {
        for kw in keywords {
            let mut from = 0;
            while let Some(pos) = s[from..].find(kw) {
                let at = from + pos;
                let before_ok = at == 0 || !s[..at].chars().next_back().is_some_and(char::is_alphanumeric);
                let rest = &s[at + kw.len()..];
                let after_ok = !rest.chars().next().is_some_and(char::is_alphabetic);
                if before_ok && after_ok {
                    let rest = rest.trim_start_matches(|c: char| c == ':' || c == '=' || c.is_whitespace());
                    if units::leading_number(rest).is_some() {
                        return units::parse_quantity(analyte, rest);
                    }
                }
                from = at + kw.len();
            }
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq)]
pub struct RuleResult<T> {
    pub features: T,
    pub grounded: usize,
    pub schema_fields: usize,
}

impl<T> RuleResult<T> {
    pub fn confidence(&self) -> f64 {
        self.grounded as f64 / self.schema_fields as f64
    }
}

pub fn radiology(text: &str) -> RuleResult<RadiologyFeatures> {
    let sents = sentences(text);
    let mut r = RadiologyFeatures {
        psma_expression: if sents.iter().any(|s| any(s, &["heterogeneous psma", "heterogeneous uptake", "psma expression: heterogeneous"])) {
            PsmaExpression::Heterogeneous
        } else if sents.iter().any(|s| any(s, &["high psma", "intense psma", "strong psma", "psma expression: high", "psma-high"])) {
            PsmaExpression::High
        } else if sents.iter().any(|s| any(s, &["moderate psma", "psma expression: moderate"])) {
            PsmaExpression::Moderate
        } else if sents.iter().any(|s| any(s, &["low psma", "weak psma", "faint psma", "psma expression: low"])) {
            PsmaExpression::Low
        } else {
            PsmaExpression::Unknown
        },
        bone_met: tri(&sents, &["no bone", "no osseous", "no skeletal"], &["bone", "osseous", "skeletal"]),
        lymph_met: tri(&sents, &["no lymph", "no nodal"], &["lymph node", "nodal"]),
        visceral_met: tri(&sents, &["no visceral"], &["visceral"]),
        liver_met: tri(&sents, &["no liver", "no hepatic"], &["liver", "hepatic"]),
        lung_met: tri(&sents, &["no lung", "no pulmonary"], &["lung", "pulmonary"]),
        tumor_burden: if sents.iter().any(|s| any(s, &["high tumor burden", "tumor burden: high"])) {
            TumorBurden::High
        } else if sents.iter().any(|s| any(s, &["moderate tumor burden", "tumor burden: moderate"])) {
            TumorBurden::Moderate
        } else if sents.iter().any(|s| any(s, &["low tumor burden", "tumor burden: low"])) {
            TumorBurden::Low
        } else {
            TumorBurden::Unknown
        },
        suv_max: quantity_after(&sents, &["suvmax", "suv max", "maximum suv"], Analyte::Unitless),
    };
    if sents.iter().any(|s| s.contains("bone-only") || s.contains("bone only")) {
        r.bone_met = TriState::Yes;
        r.lymph_met = TriState::No;
        r.visceral_met = TriState::No;
    }
    // absence of visceral disease settles liver and lung
    if r.visceral_met == TriState::No {
        r.liver_met = TriState::No;
        r.lung_met = TriState::No;
    }
    if r.liver_met == TriState::Yes || r.lung_met == TriState::Yes {
        r.visceral_met = TriState::Yes;
    }
    let grounded = [
        r.psma_expression.is_known(),
        r.bone_met.is_known(),
        r.lymph_met.is_known(),
        r.visceral_met.is_known(),
        r.liver_met.is_known(),
        r.lung_met.is_known(),
        r.tumor_burden.is_known(),
        r.suv_max.is_some(),
    ]
    .into_iter()
    .filter(|b| *b)
    .count();
    RuleResult { features: r, grounded, schema_fields: 8 }
}

pub fn labs(text: &str) -> RuleResult<LabFeatures> {
    let sents = sentences(text);
    let psa_sents: Vec<String> = sents.iter().filter(|s| s.contains("psa")).cloned().collect();
    let l = LabFeatures {
        psa: quantity_after(&sents, &["psa"], Analyte::Psa),
        psa_trend: if psa_sents.iter().any(|s| any(s, &["rising", "increasing", "rise"])) {
            PsaTrend::Rising
        } else if psa_sents.iter().any(|s| any(s, &["falling", "declining", "decreasing"])) {
            PsaTrend::Falling
        } else if psa_sents.iter().any(|s| s.contains("stable")) {
            PsaTrend::Stable
        } else {
            PsaTrend::Unknown
        },
        hemoglobin: quantity_after(&sents, &["hemoglobin", "haemoglobin", "hb"], Analyte::Hemoglobin),
        alp: quantity_after(&sents, &["alkaline phosphatase", "alp"], Analyte::Enzyme),
        ldh: quantity_after(&sents, &["lactate dehydrogenase", "ldh"], Analyte::Enzyme),
        egfr: quantity_after(&sents, &["egfr", "estimated gfr"], Analyte::Egfr),
    };
    let grounded = [
        l.psa.is_some(),
        l.psa_trend.is_known(),
        l.hemoglobin.is_some(),
        l.alp.is_some(),
        l.ldh.is_some(),
        l.egfr.is_some(),
    ]
    .into_iter()
    .filter(|b| *b)
    .count();
    RuleResult { features: l, grounded, schema_fields: 6 }
}

const COMORBIDITY_LEXICON: &[(&str, &str)] = &[
    ("hypertension", "hypertension"),
    ("type 2 diabetes", "type 2 diabetes"),
    ("diabetes", "type 2 diabetes"),
    ("coronary artery disease", "coronary artery disease"),
    ("chronic kidney disease", "chronic kidney disease"),
    ("atrial fibrillation", "atrial fibrillation"),
    ("copd", "copd"),
];

pub fn clinical(text: &str) -> RuleResult<ClinicalFeatures> {
    let sents = sentences(text);
    let prior_adt = tri(
        &sents,
        &["no prior adt", "no adt", "adt-naive", "no androgen deprivation"],
        &["adt", "androgen deprivation", "enzalutamide", "abiraterone"],
    );
    let prior_chemo = tri(
        &sents,
        &["no prior chemo", "no chemotherapy", "chemotherapy-naive", "chemo-naive"],
        &["docetaxel", "cabazitaxel", "chemotherapy", "chemo"],
    );
    let chemo_lines = sents.iter().find_map(|s| {
        let pos = s.find("line")?;
        let before = s[..pos].trim_end();
        let word = before.rsplit(|c: char| c.is_whitespace()).next()?;
        let n = word.parse::<u32>().ok()?;
        s[pos..].contains("chemo").then_some(n)
    });
    let ecog = quantity_after(&sents, &["ecog ps", "ecog"], Analyte::Unitless)
        .filter(|v| *v >= 0.0 && *v < 256.0 && libm::trunc(*v) == *v)
        .map(|v| v as u8);
    let comorbidities = if sents.iter().any(|s| any(s, &["no comorbidities", "no relevant comorbidities", "comorbidities: none"])) {
        Some(Vec::new())
    } else {
        let mut found: Vec<String> = Vec::new();
        for (needle, norm) in COMORBIDITY_LEXICON {
            if sents.iter().any(|s| s.contains(needle)) && !found.iter().any(|f| f == norm) {
                found.push(norm.to_string());
            }
        }
        (!found.is_empty()).then_some(found)
    };
    let c = ClinicalFeatures { prior_adt, prior_chemo, chemo_lines, ecog, comorbidities };
    let grounded = [
        c.prior_adt.is_known(),
        c.prior_chemo.is_known(),
        c.chemo_lines.is_some(),
        c.ecog.is_some(),
        c.comorbidities.is_some(),
    ]
    .into_iter()
    .filter(|b| *b)
    .count();
    RuleResult { features: c, grounded, schema_fields: 5 }
}

/// All three rule sets over one combined text.
pub fn combined(text: &str) -> (Features, f64) {
    let r = radiology(text);
    let l = labs(text);
    let c = clinical(text);
    let grounded = r.grounded + l.grounded + c.grounded;
    let total = r.schema_fields + l.schema_fields + c.schema_fields;
    (
        Features { radiology: r.features, labs: l.features, clinical: c.features },
        grounded as f64 / total as f64,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_pet_text() {
        let r = radiology(
            "PSMA PET/CT shows high PSMA expression with SUVmax 32.5. Multiple bone lesions \
             in the spine and pelvis. No visceral involvement. No nodal disease.",
        )
        .features;
        assert_eq!(r.psma_expression, PsmaExpression::High);
        assert_eq!(r.bone_met, TriState::Yes);
        assert_eq!(r.visceral_met, TriState::No);
        assert_eq!(r.suv_max, Some(32.5));
        assert_eq!(r.lymph_met, TriState::No);
    }

    #[test]
    fn silent_lungs_stay_unknown() {
        let r = radiology("Intense PSMA uptake in multiple bone lesions. Two liver lesions.").features;
        assert_eq!(r.lung_met, TriState::Unknown);
        assert_eq!(r.liver_met, TriState::Yes);
        assert_eq!(r.visceral_met, TriState::Yes);
    }

    #[test]
    fn psa_with_trend() {
        let l = labs("PSA 45.2 ng/mL, rising").features;
        assert_eq!(l.psa, Some(45.2));
        assert_eq!(l.psa_trend, PsaTrend::Rising);
    }

    #[test]
    fn hemoglobin_only() {
        let res = labs("Hb 13.4 g/dL");
        assert_eq!(res.features, LabFeatures { hemoglobin: Some(13.4), ..Default::default() });
        assert_eq!(res.grounded, 1);
    }

    #[test]
    fn adt_and_docetaxel() {
        let c = clinical("prior ADT + docetaxel, ECOG 1").features;
        assert_eq!(c.prior_adt, TriState::Yes);
        assert_eq!(c.prior_chemo, TriState::Yes);
        assert_eq!(c.ecog, Some(1));
        assert_eq!(c.chemo_lines, None);
    }

    #[test]
    fn empty_history_is_unknown() {
        let res = clinical("Patient seen in clinic today. History not available.");
        assert_eq!(res.features, ClinicalFeatures::default());
        assert!(res.confidence() <= 0.5);
    }

    #[test]
    fn lines_and_comorbidities() {
        let c = clinical("Received 2 lines of chemotherapy (docetaxel, cabazitaxel). Hypertension and diabetes.").features;
        assert_eq!(c.chemo_lines, Some(2));
        assert_eq!(c.comorbidities, Some(alloc::vec!["hypertension".to_string(), "type 2 diabetes".to_string()]));
    }
}
