//! Line grammar of the synthetic document templates.
//!
//! A template document starts with a sentinel line
//! (`# theraloop-synth v1 pet|labs|notes`). Each fact sits on its own line
//! as `<prefix><value><suffix>`; every other line is narrative and carries
//! no facts. The renderer in [`crate::synth`] and the deterministic
//! extractor both use the slot table below, so anything rendered is
//! recoverable.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::domain::{Field, FieldValue, PsaTrend, PsmaExpression, TriState, TumorBurden};
use crate::units::{self, Analyte};

pub const SENTINEL_PREFIX: &str = "# theraloop-synth v1 ";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DocKind {
    Pet,
    Labs,
    Notes,
}

impl DocKind {
    pub fn tag(self) -> &'static str {
        match self {
            DocKind::Pet => "pet",
            DocKind::Labs => "labs",
            DocKind::Notes => "notes",
        }
    }

    pub fn sentinel(self) -> String {
        format!("{SENTINEL_PREFIX}{}", self.tag())
    }
}

/// The template kind declared by the sentinel line, if any.
pub fn sentinel_kind(text: &str) -> Option<DocKind> {
    text.lines().find_map(|line| {
        let tag = line.trim().strip_prefix(SENTINEL_PREFIX)?;
        [DocKind::Pet, DocKind::Labs, DocKind::Notes].into_iter().find(|k| k.tag() == tag.trim())
    })
}

pub fn has_sentinel(text: &str) -> bool {
    text.lines().any(|l| l.trim().starts_with(SENTINEL_PREFIX))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    /// `None` for slots that are parsed but not stored (creatinine).
    pub field: Option<Field>,
    pub prefix: &'static str,
    pub suffix: &'static str,
}

const fn slot(field: Field, prefix: &'static str) -> Slot {
    Slot { field: Some(field), prefix, suffix: "." }
}

pub const PET_SLOTS: &[Slot] = &[
    slot(Field::PsmaExpression, "PSMA expression: "),
    Slot { field: Some(Field::PsmaExpression), prefix: "Tracer avidity corresponds to ", suffix: " PSMA expression." },
    slot(Field::PsmaExpression, "PSMA expression was graded as "),
    slot(Field::BoneMet, "Bone metastases: "),
    slot(Field::BoneMet, "Osseous metastatic disease: "),
    slot(Field::LymphMet, "Nodal metastases: "),
    slot(Field::LymphMet, "Lymph node metastases: "),
    slot(Field::VisceralMet, "Visceral metastases: "),
    slot(Field::VisceralMet, "Visceral involvement: "),
    slot(Field::LiverMet, "Liver metastases: "),
    slot(Field::LiverMet, "Hepatic metastases: "),
    slot(Field::LungMet, "Lung metastases: "),
    slot(Field::LungMet, "Pulmonary metastases: "),
    slot(Field::TumorBurden, "Overall tumor burden: "),
    slot(Field::TumorBurden, "Tumor burden graded as "),
    slot(Field::SuvMax, "SUVmax of the hottest lesion: "),
    slot(Field::SuvMax, "Maximum SUV: "),
];

pub const LAB_SLOTS: &[Slot] = &[
    slot(Field::Psa, "Serum PSA: "),
    slot(Field::Psa, "PSA level: "),
    slot(Field::PsaTrend, "PSA trend: "),
    slot(Field::PsaTrend, "PSA kinetics: "),
    slot(Field::Hemoglobin, "Hemoglobin: "),
    slot(Field::Hemoglobin, "Hb: "),
    slot(Field::Alp, "ALP: "),
    slot(Field::Alp, "Alkaline phosphatase: "),
    slot(Field::Ldh, "LDH: "),
    slot(Field::Ldh, "Lactate dehydrogenase: "),
    slot(Field::Egfr, "eGFR: "),
    slot(Field::Egfr, "Estimated GFR: "),
    Slot { field: None, prefix: "Creatinine: ", suffix: "." },
];

pub const NOTE_SLOTS: &[Slot] = &[
    slot(Field::PriorAdt, "Prior ADT: "),
    slot(Field::PriorAdt, "Androgen deprivation therapy received: "),
    slot(Field::PriorChemo, "Prior chemotherapy: "),
    slot(Field::PriorChemo, "Taxane chemotherapy received: "),
    slot(Field::ChemoLines, "Chemotherapy lines: "),
    slot(Field::ChemoLines, "Number of prior chemotherapy lines: "),
    slot(Field::Ecog, "ECOG PS: "),
    slot(Field::Ecog, "Performance status (ECOG): "),
    slot(Field::Comorbidities, "Comorbidities: "),
    slot(Field::Comorbidities, "Relevant comorbidities: "),
    slot(Field::Psa, "PSA at referral: "),
];

pub fn slots_for(kind: DocKind) -> &'static [Slot] {
    match kind {
        DocKind::Pet => PET_SLOTS,
        DocKind::Labs => LAB_SLOTS,
        DocKind::Notes => NOTE_SLOTS,
    }
}

/// Phrasing variants available for `field` in documents of `kind`.
pub fn variants(kind: DocKind, field: Field) -> Vec<Slot> {
    slots_for(kind).iter().copied().filter(|s| s.field == Some(field)).collect()
}

/// Finds the slot a line instantiates, preferring the longest prefix.
pub fn match_line(line: &str, slots: &[Slot]) -> Option<(Slot, String)> {
    let line = line.trim();
    slots
        .iter()
        .filter(|s| {
            line.len() >= s.prefix.len() + s.suffix.len()
                && line.starts_with(s.prefix)
                && line.ends_with(s.suffix)
        })
        .max_by_key(|s| s.prefix.len())
        .map(|s| (*s, line[s.prefix.len()..line.len() - s.suffix.len()].to_string()))
}

pub fn is_slot_line(line: &str) -> bool {
    [PET_SLOTS, LAB_SLOTS, NOTE_SLOTS]
        .iter()
        .any(|slots| match_line(line, slots).is_some())
}

fn is_metastasis(field: Field) -> bool {
    matches!(
        field,
        Field::BoneMet | Field::LymphMet | Field::VisceralMet | Field::LiverMet | Field::LungMet
    )
}

/// Text for a known value as the templates print it.
pub fn render_value(field: Field, value: &FieldValue, alt_unit: bool) -> String {
    match value {
        FieldValue::Tri(t) if is_metastasis(field) => {
            if *t == TriState::Yes { "present" } else { "absent" }.to_string()
        }
        FieldValue::Tri(t) => t.as_str().to_string(),
        FieldValue::Psma(p) => p.as_str().to_string(),
        FieldValue::Burden(b) => b.as_str().to_string(),
        FieldValue::Trend(t) => t.as_str().to_string(),
        FieldValue::Count(n) => format!("{n}"),
        FieldValue::Terms(t) if t.is_empty() => "none".to_string(),
        FieldValue::Terms(t) => t.join("; "),
        FieldValue::Decimal(v) => match field {
            Field::Psa => format!("{} ng/mL", units::fmt1(*v)),
            Field::Hemoglobin if alt_unit => format!("{} g/L", libm::round(*v * 10.0) as i64),
            Field::Hemoglobin => format!("{} g/dL", units::fmt1(*v)),
            Field::Alp | Field::Ldh if alt_unit => format!("{} IU/L", units::fmt1(*v)),
            Field::Alp | Field::Ldh => format!("{} U/L", units::fmt1(*v)),
            Field::Egfr => format!("{} mL/min/1.73m2", units::fmt1(*v)),
            _ => units::fmt1(*v),
        },
    }
}

/// Parses a slot value. `Ok(None)` means the value was deliberately not
/// stored (an unrecognized unit); `Err` means the slot text is malformed.
pub fn parse_value(field: Field, raw: &str) -> Result<Option<FieldValue>, String> {
    let raw = raw.trim();
    let bad = || format!("cannot read {} from {raw:?}", field.name());
    let value = match field {
        Field::PsmaExpression => FieldValue::Psma(PsmaExpression::parse(raw).ok_or_else(bad)?),
        Field::TumorBurden => FieldValue::Burden(TumorBurden::parse(raw).ok_or_else(bad)?),
        Field::PsaTrend => FieldValue::Trend(PsaTrend::parse(raw).ok_or_else(bad)?),
        Field::BoneMet
        | Field::LymphMet
        | Field::VisceralMet
        | Field::LiverMet
        | Field::LungMet
        | Field::PriorAdt
        | Field::PriorChemo => FieldValue::Tri(match raw {
            "present" | "yes" => TriState::Yes,
            "absent" | "no" => TriState::No,
            _ => return Err(bad()),
        }),
        Field::ChemoLines | Field::Ecog => FieldValue::Count(raw.parse::<u32>().map_err(|_| bad())?),
        Field::Comorbidities => FieldValue::Terms(if raw == "none" {
            vec![]
        } else {
            raw.split(';').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect()
        }),
        Field::SuvMax | Field::Psa | Field::Hemoglobin | Field::Alp | Field::Ldh | Field::Egfr => {
            let analyte = match field {
                Field::SuvMax => Analyte::Unitless,
                Field::Psa => Analyte::Psa,
                Field::Hemoglobin => Analyte::Hemoglobin,
                Field::Egfr => Analyte::Egfr,
                _ => Analyte::Enzyme,
            };
            if units::leading_number(raw).is_none() {
                return Err(bad());
            }
            return Ok(units::parse_quantity(analyte, raw).map(FieldValue::Decimal));
        }
    };
    Ok(Some(value))
}
