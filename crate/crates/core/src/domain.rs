//! Shared domain types: patient records, expert fragments, the unified
//! profile, outcomes and the memory index key.
//!
//! All feature flags extracted from free text are tri-state. `Unknown` means
//! "not evidenced in the source" and is never treated as absence.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

/// Upper plausibility bounds for laboratory values (exclusive).
pub const PSA_MAX: f64 = 10_000.0;
pub const HEMOGLOBIN_MAX: f64 = 25.0;
pub const ALP_MAX: f64 = 5_000.0;
pub const LDH_MAX: f64 = 10_000.0;
pub const EGFR_MAX: f64 = 200.0;
pub const ECOG_MAX: u8 = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriState {
    Yes,
    No,
    #[default]
    Unknown,
}

impl TriState {
    pub fn is_known(self) -> bool {
        self != TriState::Unknown
    }

    pub fn from_bool(b: bool) -> Self {
        if b {
            TriState::Yes
        } else {
            TriState::No
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TriState::Yes => "yes",
            TriState::No => "no",
            TriState::Unknown => "unknown",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsmaExpression {
    High,
    Moderate,
    Low,
    Heterogeneous,
    #[default]
    Unknown,
}

impl PsmaExpression {
    pub const KNOWN: [PsmaExpression; 4] = [
        PsmaExpression::High,
        PsmaExpression::Moderate,
        PsmaExpression::Low,
        PsmaExpression::Heterogeneous,
    ];

    pub fn is_known(self) -> bool {
        self != PsmaExpression::Unknown
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PsmaExpression::High => "high",
            PsmaExpression::Moderate => "moderate",
            PsmaExpression::Low => "low",
            PsmaExpression::Heterogeneous => "heterogeneous",
            PsmaExpression::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::KNOWN.into_iter().find(|v| v.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TumorBurden {
    Low,
    Moderate,
    High,
    #[default]
    Unknown,
}

impl TumorBurden {
    pub const KNOWN: [TumorBurden; 3] = [TumorBurden::Low, TumorBurden::Moderate, TumorBurden::High];

    pub fn is_known(self) -> bool {
        self != TumorBurden::Unknown
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TumorBurden::Low => "low",
            TumorBurden::Moderate => "moderate",
            TumorBurden::High => "high",
            TumorBurden::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::KNOWN.into_iter().find(|v| v.as_str() == s)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsaTrend {
    Rising,
    Stable,
    Falling,
    #[default]
    Unknown,
}

impl PsaTrend {
    pub const KNOWN: [PsaTrend; 3] = [PsaTrend::Rising, PsaTrend::Stable, PsaTrend::Falling];

    pub fn is_known(self) -> bool {
        self != PsaTrend::Unknown
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PsaTrend::Rising => "rising",
            PsaTrend::Stable => "stable",
            PsaTrend::Falling => "falling",
            PsaTrend::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::KNOWN.into_iter().find(|v| v.as_str() == s)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadiologyFeatures {
    pub psma_expression: PsmaExpression,
    pub bone_met: TriState,
    pub lymph_met: TriState,
    pub visceral_met: TriState,
    pub liver_met: TriState,
    pub lung_met: TriState,
    pub tumor_burden: TumorBurden,
    pub suv_max: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabFeatures {
    pub psa: Option<f64>,
    pub psa_trend: PsaTrend,
    pub hemoglobin: Option<f64>,
    pub alp: Option<f64>,
    pub ldh: Option<f64>,
    pub egfr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClinicalFeatures {
    pub prior_adt: TriState,
    pub prior_chemo: TriState,
    pub chemo_lines: Option<u32>,
    pub ecog: Option<u8>,
    /// `None` is unknown; `Some(vec![])` means "none documented".
    pub comorbidities: Option<Vec<String>>,
}

/// Every extracted feature. Serializes to the flat profile document layout.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Features {
    #[serde(flatten)]
    pub radiology: RadiologyFeatures,
    #[serde(flatten)]
    pub labs: LabFeatures,
    #[serde(flatten)]
    pub clinical: ClinicalFeatures,
}

/// Names of every profile field, in profile document spelling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    PsmaExpression,
    BoneMet,
    LymphMet,
    VisceralMet,
    LiverMet,
    LungMet,
    TumorBurden,
    SuvMax,
    Psa,
    PsaTrend,
    Hemoglobin,
    Alp,
    Ldh,
    Egfr,
    PriorAdt,
    PriorChemo,
    ChemoLines,
    Ecog,
    Comorbidities,
}

/// Which fragment family a field belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldGroup {
    Imaging,
    Lab,
    Clinical,
}

impl Field {
    pub const ALL: [Field; 19] = [
        Field::PsmaExpression,
        Field::BoneMet,
        Field::LymphMet,
        Field::VisceralMet,
        Field::LiverMet,
        Field::LungMet,
        Field::TumorBurden,
        Field::SuvMax,
        Field::Psa,
        Field::PsaTrend,
        Field::Hemoglobin,
        Field::Alp,
        Field::Ldh,
        Field::Egfr,
        Field::PriorAdt,
        Field::PriorChemo,
        Field::ChemoLines,
        Field::Ecog,
        Field::Comorbidities,
    ];

    pub const RADIOLOGY: [Field; 8] = [
        Field::PsmaExpression,
        Field::BoneMet,
        Field::LymphMet,
        Field::VisceralMet,
        Field::LiverMet,
        Field::LungMet,
        Field::TumorBurden,
        Field::SuvMax,
    ];

    pub const LABS: [Field; 6] = [
        Field::Psa,
        Field::PsaTrend,
        Field::Hemoglobin,
        Field::Alp,
        Field::Ldh,
        Field::Egfr,
    ];

    pub const CLINICAL: [Field; 5] = [
        Field::PriorAdt,
        Field::PriorChemo,
        Field::ChemoLines,
        Field::Ecog,
        Field::Comorbidities,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::PsmaExpression => "psma_expression",
            Field::BoneMet => "bone_met",
            Field::LymphMet => "lymph_met",
            Field::VisceralMet => "visceral_met",
            Field::LiverMet => "liver_met",
            Field::LungMet => "lung_met",
            Field::TumorBurden => "tumor_burden",
            Field::SuvMax => "suv_max",
            Field::Psa => "psa",
            Field::PsaTrend => "psa_trend",
            Field::Hemoglobin => "hemoglobin",
            Field::Alp => "alp",
            Field::Ldh => "ldh",
            Field::Egfr => "egfr",
            Field::PriorAdt => "prior_adt",
            Field::PriorChemo => "prior_chemo",
            Field::ChemoLines => "chemo_lines",
            Field::Ecog => "ecog",
            Field::Comorbidities => "comorbidities",
        }
    }

    pub fn from_name(name: &str) -> Option<Field> {
        Field::ALL.into_iter().find(|f| f.name() == name)
    }

    pub fn group(self) -> FieldGroup {
        if Field::RADIOLOGY.contains(&self) {
            FieldGroup::Imaging
        } else if Field::LABS.contains(&self) {
            FieldGroup::Lab
        } else {
            FieldGroup::Clinical
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A single known field value, used where fields are handled generically.
#[derive(Clone, Debug, PartialEq)]
pub enum FieldValue {
    Psma(PsmaExpression),
    Tri(TriState),
    Burden(TumorBurden),
    Trend(PsaTrend),
    Decimal(f64),
    Count(u32),
    Terms(Vec<String>),
}

impl fmt::Display for FieldValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldValue::Psma(v) => f.write_str(v.as_str()),
            FieldValue::Tri(v) => f.write_str(v.as_str()),
            FieldValue::Burden(v) => f.write_str(v.as_str()),
            FieldValue::Trend(v) => f.write_str(v.as_str()),
            FieldValue::Decimal(v) => write!(f, "{v}"),
            FieldValue::Count(v) => write!(f, "{v}"),
            FieldValue::Terms(v) if v.is_empty() => f.write_str("none"),
            FieldValue::Terms(v) => f.write_str(&v.join("; ")),
        }
    }
}

impl Features {
    /// Returns the value of `field`, or `None` when it is unknown.
    pub fn get(&self, field: Field) -> Option<FieldValue> {
        let r = &self.radiology;
        let l = &self.labs;
        let c = &self.clinical;
        let tri = |t: TriState| t.is_known().then_some(FieldValue::Tri(t));
        match field {
            Field::PsmaExpression => r.psma_expression.is_known().then_some(FieldValue::Psma(r.psma_expression)),
            Field::BoneMet => tri(r.bone_met),
            Field::LymphMet => tri(r.lymph_met),
            Field::VisceralMet => tri(r.visceral_met),
            Field::LiverMet => tri(r.liver_met),
            Field::LungMet => tri(r.lung_met),
            Field::TumorBurden => r.tumor_burden.is_known().then_some(FieldValue::Burden(r.tumor_burden)),
            Field::SuvMax => r.suv_max.map(FieldValue::Decimal),
            Field::Psa => l.psa.map(FieldValue::Decimal),
            Field::PsaTrend => l.psa_trend.is_known().then_some(FieldValue::Trend(l.psa_trend)),
            Field::Hemoglobin => l.hemoglobin.map(FieldValue::Decimal),
            Field::Alp => l.alp.map(FieldValue::Decimal),
            Field::Ldh => l.ldh.map(FieldValue::Decimal),
            Field::Egfr => l.egfr.map(FieldValue::Decimal),
            Field::PriorAdt => tri(c.prior_adt),
            Field::PriorChemo => tri(c.prior_chemo),
            Field::ChemoLines => c.chemo_lines.map(FieldValue::Count),
            Field::Ecog => c.ecog.map(|e| FieldValue::Count(u32::from(e))),
            Field::Comorbidities => c.comorbidities.clone().map(FieldValue::Terms),
        }
    }

    /// Sets `field`. Returns `false` (leaving the set untouched) when the
    /// value's kind does not fit the field.
    pub fn set(&mut self, field: Field, value: FieldValue) -> bool {
        let r = &mut self.radiology;
        let l = &mut self.labs;
        let c = &mut self.clinical;
        match (field, value) {
            (Field::PsmaExpression, FieldValue::Psma(v)) => r.psma_expression = v,
            (Field::BoneMet, FieldValue::Tri(v)) => r.bone_met = v,
            (Field::LymphMet, FieldValue::Tri(v)) => r.lymph_met = v,
            (Field::VisceralMet, FieldValue::Tri(v)) => r.visceral_met = v,
            (Field::LiverMet, FieldValue::Tri(v)) => r.liver_met = v,
            (Field::LungMet, FieldValue::Tri(v)) => r.lung_met = v,
            (Field::TumorBurden, FieldValue::Burden(v)) => r.tumor_burden = v,
            (Field::SuvMax, FieldValue::Decimal(v)) => r.suv_max = Some(v),
            (Field::Psa, FieldValue::Decimal(v)) => l.psa = Some(v),
            (Field::PsaTrend, FieldValue::Trend(v)) => l.psa_trend = v,
            (Field::Hemoglobin, FieldValue::Decimal(v)) => l.hemoglobin = Some(v),
            (Field::Alp, FieldValue::Decimal(v)) => l.alp = Some(v),
            (Field::Ldh, FieldValue::Decimal(v)) => l.ldh = Some(v),
            (Field::Egfr, FieldValue::Decimal(v)) => l.egfr = Some(v),
            (Field::PriorAdt, FieldValue::Tri(v)) => c.prior_adt = v,
            (Field::PriorChemo, FieldValue::Tri(v)) => c.prior_chemo = v,
            (Field::ChemoLines, FieldValue::Count(v)) => c.chemo_lines = Some(v),
            (Field::Ecog, FieldValue::Count(v)) => match u8::try_from(v) {
                Ok(e) => c.ecog = Some(e),
                Err(_) => return false,
            },
            (Field::Comorbidities, FieldValue::Terms(v)) => c.comorbidities = Some(v),
            _ => return false,
        }
        true
    }

    pub fn known_fields(&self) -> impl Iterator<Item = Field> + '_ {
        Field::ALL.into_iter().filter(|f| self.get(*f).is_some())
    }

    pub fn is_all_unknown(&self) -> bool {
        self.known_fields().next().is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expert {
    Radiologist,
    Biochemist,
    Oncologist,
}

impl Expert {
    pub const ALL: [Expert; 3] = [Expert::Radiologist, Expert::Biochemist, Expert::Oncologist];

    pub fn as_str(self) -> &'static str {
        match self {
            Expert::Radiologist => "radiologist",
            Expert::Biochemist => "biochemist",
            Expert::Oncologist => "oncologist",
        }
    }

    /// Fields this expert's fragment type carries.
    pub fn owned_fields(self) -> &'static [Field] {
        match self {
            Expert::Radiologist => &Field::RADIOLOGY,
            Expert::Biochemist => &Field::LABS,
            Expert::Oncologist => &Field::CLINICAL,
        }
    }
}

impl fmt::Display for Expert {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Fragment {
    Radiology(RadiologyFeatures),
    Labs(LabFeatures),
    Clinical(ClinicalFeatures),
}

impl Fragment {
    pub fn empty_for(expert: Expert) -> Self {
        match expert {
            Expert::Radiologist => Fragment::Radiology(RadiologyFeatures::default()),
            Expert::Biochemist => Fragment::Labs(LabFeatures::default()),
            Expert::Oncologist => Fragment::Clinical(ClinicalFeatures::default()),
        }
    }

    pub fn matches(&self, expert: Expert) -> bool {
        matches!(
            (self, expert),
            (Fragment::Radiology(_), Expert::Radiologist)
                | (Fragment::Labs(_), Expert::Biochemist)
                | (Fragment::Clinical(_), Expert::Oncologist)
        )
    }

    /// The fragment lifted into a full feature set (other groups unknown).
    pub fn to_features(&self) -> Features {
        let mut f = Features::default();
        match self {
            Fragment::Radiology(r) => f.radiology = r.clone(),
            Fragment::Labs(l) => f.labs = l.clone(),
            Fragment::Clinical(c) => f.clinical = c.clone(),
        }
        f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertOutput {
    pub expert: Expert,
    pub fragment: Fragment,
    pub confidence: f64,
    #[serde(default)]
    pub field_confidences: Option<BTreeMap<Field, f64>>,
    #[serde(default)]
    pub notes: String,
    /// Fields outside the expert's own fragment that its document also
    /// states (for example a PSA value quoted in clinical notes).
    #[serde(default)]
    pub cross_observations: Features,
}

impl ExpertOutput {
    /// An all-unknown output at confidence 0, used for missing documents.
    pub fn empty(expert: Expert, notes: &str) -> Self {
        ExpertOutput {
            expert,
            fragment: Fragment::empty_for(expert),
            confidence: 0.0,
            field_confidences: None,
            notes: notes.to_string(),
            cross_observations: Features::default(),
        }
    }

    /// Everything the expert reported: own fragment plus cross observations.
    pub fn observed(&self) -> Features {
        let mut all = self.cross_observations.clone();
        let own = self.fragment.to_features();
        for field in self.expert.owned_fields() {
            match own.get(*field) {
                Some(v) => {
                    all.set(*field, v);
                }
                None => clear_field(&mut all, *field),
            }
        }
        all
    }

    pub fn field_confidence(&self, field: Field) -> f64 {
        self.field_confidences
            .as_ref()
            .and_then(|m| m.get(&field).copied())
            .unwrap_or(self.confidence)
    }
}

pub(crate) fn clear_field(features: &mut Features, field: Field) {
    let r = &mut features.radiology;
    let l = &mut features.labs;
    let c = &mut features.clinical;
    match field {
        Field::PsmaExpression => r.psma_expression = PsmaExpression::Unknown,
        Field::BoneMet => r.bone_met = TriState::Unknown,
        Field::LymphMet => r.lymph_met = TriState::Unknown,
        Field::VisceralMet => r.visceral_met = TriState::Unknown,
        Field::LiverMet => r.liver_met = TriState::Unknown,
        Field::LungMet => r.lung_met = TriState::Unknown,
        Field::TumorBurden => r.tumor_burden = TumorBurden::Unknown,
        Field::SuvMax => r.suv_max = None,
        Field::Psa => l.psa = None,
        Field::PsaTrend => l.psa_trend = PsaTrend::Unknown,
        Field::Hemoglobin => l.hemoglobin = None,
        Field::Alp => l.alp = None,
        Field::Ldh => l.ldh = None,
        Field::Egfr => l.egfr = None,
        Field::PriorAdt => c.prior_adt = TriState::Unknown,
        Field::PriorChemo => c.prior_chemo = TriState::Unknown,
        Field::ChemoLines => c.chemo_lines = None,
        Field::Ecog => c.ecog = None,
        Field::Comorbidities => c.comorbidities = None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub expert: Expert,
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictRule {
    HigherConfidence,
    ExpertPrecedence,
    EvidenceReview,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictCandidate {
    pub expert: Expert,
    pub value: String,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictNote {
    pub field: Field,
    pub candidates: Vec<ConflictCandidate>,
    pub resolution: String,
    pub rule: ConflictRule,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnifiedProfile {
    pub patient_id: String,
    #[serde(flatten)]
    pub features: Features,
    #[serde(default)]
    pub provenance: BTreeMap<Field, Provenance>,
    #[serde(default)]
    pub conflicts: Vec<ConflictNote>,
}

impl UnifiedProfile {
    /// Wraps fully specified features with uniform provenance, attributing
    /// each field to the expert whose fragment owns it.
    pub fn with_uniform_provenance(patient_id: &str, features: Features, confidence: f64) -> Self {
        let provenance = features
            .known_fields()
            .map(|field| (field, Provenance { expert: owner_of(field), confidence }))
            .collect();
        UnifiedProfile {
            patient_id: patient_id.to_string(),
            features,
            provenance,
            conflicts: Vec::new(),
        }
    }

    pub fn get(&self, field: Field) -> Option<FieldValue> {
        self.features.get(field)
    }

    pub fn radiology(&self) -> &RadiologyFeatures {
        &self.features.radiology
    }

    pub fn labs(&self) -> &LabFeatures {
        &self.features.labs
    }

    pub fn clinical(&self) -> &ClinicalFeatures {
        &self.features.clinical
    }
}

/// The expert whose fragment type carries `field`.
pub fn owner_of(field: Field) -> Expert {
    match field.group() {
        FieldGroup::Imaging => Expert::Radiologist,
        FieldGroup::Lab => Expert::Biochemist,
        FieldGroup::Clinical => Expert::Oncologist,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    PsaResponse,
    #[serde(rename = "os_gt_12m")]
    OsGt12m,
}

impl Target {
    pub const ALL: [Target; 2] = [Target::PsaResponse, Target::OsGt12m];

    pub fn as_str(self) -> &'static str {
        match self {
            Target::PsaResponse => "psa_response",
            Target::OsGt12m => "os_gt_12m",
        }
    }

    pub fn parse(s: &str) -> Option<Target> {
        Target::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Outcome {
    pub psa_response: bool,
    pub os_gt_12m: bool,
}

impl Outcome {
    pub fn get(&self, target: Target) -> bool {
        match target {
            Target::PsaResponse => self.psa_response,
            Target::OsGt12m => self.os_gt_12m,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct IndexKey {
    pub psma_level: PsmaExpression,
    pub liver_met: TriState,
    pub lung_met: TriState,
    pub prior_chemo: TriState,
}

/// Projects the four indexing fields; unknowns stay unknown.
pub fn index_key(profile: &UnifiedProfile) -> IndexKey {
    IndexKey {
        psma_level: profile.radiology().psma_expression,
        liver_met: profile.radiology().liver_met,
        lung_met: profile.radiology().lung_met,
        prior_chemo: profile.clinical().prior_chemo,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub pet_report: String,
    pub lab_report: String,
    pub clinical_notes: String,
    #[serde(default)]
    pub language_hint: Option<String>,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<(), RecordError> {
        if self.patient_id.trim().is_empty() {
            return Err(RecordError::EmptyPatientId);
        }
        if self.pet_report.trim().is_empty()
            && self.lab_report.trim().is_empty()
            && self.clinical_notes.trim().is_empty()
        {
            return Err(RecordError::NoDocuments(self.patient_id.clone()));
        }
        Ok(())
    }

    pub fn document(&self, expert: Expert) -> &str {
        match expert {
            Expert::Radiologist => &self.pet_report,
            Expert::Biochemist => &self.lab_report,
            Expert::Oncologist => &self.clinical_notes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RecordError {
    #[error("patient_id is empty")]
    EmptyPatientId,
    #[error("patient {0} has no documents")]
    NoDocuments(String),
    #[error("patient_id {0} appears more than once in the cohort")]
    DuplicatePatient(String),
}

/// Checks cohort-level uniqueness of patient ids plus per-record rules.
pub fn validate_cohort(records: &[PatientRecord]) -> Result<(), RecordError> {
    let mut seen = alloc::collections::BTreeSet::new();
    for r in records {
        r.validate()?;
        if !seen.insert(r.patient_id.as_str()) {
            return Err(RecordError::DuplicatePatient(r.patient_id.clone()));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: Option<Field>,
    pub rule: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_rule(&self, rule: &str) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }

    fn push(&mut self, field: Option<Field>, rule: &str) {
        self.violations.push(Violation { field, rule: rule.to_string() });
    }
}

fn check_range(report: &mut ValidationReport, field: Field, value: Option<f64>, lo: f64, hi: f64, strict_lo: bool, rule: &str) {
    if let Some(v) = value {
        let lo_ok = if strict_lo { v > lo } else { v >= lo };
        if !(lo_ok && v < hi) {
            report.push(Some(field), rule);
        }
    }
}

/// Checks features-only invariants (no provenance).
pub fn validate_features(features: &Features) -> ValidationReport {
    let mut report = ValidationReport::default();
    let r = &features.radiology;
    if r.liver_met == TriState::Yes && r.visceral_met != TriState::Yes {
        report.push(Some(Field::LiverMet), "liver implies visceral");
    }
    if r.lung_met == TriState::Yes && r.visceral_met != TriState::Yes {
        report.push(Some(Field::LungMet), "lung implies visceral");
    }
    if let Some(suv) = r.suv_max {
        if !(suv >= 0.0 && suv.is_finite()) {
            report.push(Some(Field::SuvMax), "suv_max non-negative");
        }
    }
    let l = &features.labs;
    check_range(&mut report, Field::Psa, l.psa, 0.0, PSA_MAX, false, "psa within [0,10000)");
    check_range(&mut report, Field::Hemoglobin, l.hemoglobin, 0.0, HEMOGLOBIN_MAX, true, "hemoglobin within (0,25)");
    check_range(&mut report, Field::Alp, l.alp, 0.0, ALP_MAX, false, "alp within [0,5000)");
    check_range(&mut report, Field::Ldh, l.ldh, 0.0, LDH_MAX, false, "ldh within [0,10000)");
    check_range(&mut report, Field::Egfr, l.egfr, 0.0, EGFR_MAX, false, "egfr within [0,200)");
    let c = &features.clinical;
    if c.chemo_lines.is_some_and(|n| n >= 1) && c.prior_chemo != TriState::Yes {
        report.push(Some(Field::ChemoLines), "chemo lines imply prior chemo");
    }
    if c.ecog.is_some_and(|e| e > ECOG_MAX) {
        report.push(Some(Field::Ecog), "ecog within [0,4]");
    }
    report
}

/// Returns every violated invariant of `profile`, never stopping early.
pub fn validate_profile(profile: &UnifiedProfile) -> ValidationReport {
    let mut report = validate_features(&profile.features);
    if profile.patient_id.trim().is_empty() {
        report.push(None, "patient_id non-empty");
    }
    for field in profile.features.known_fields() {
        if !profile.provenance.contains_key(&field) {
            report.push(Some(field), "known field has provenance");
        }
    }
    for (field, p) in &profile.provenance {
        if !(0.0..=1.0).contains(&p.confidence) {
            report.push(Some(*field), "provenance confidence within [0,1]");
        }
    }
    for note in &profile.conflicts {
        let distinct = note
            .candidates
            .iter()
            .any(|c| c.value != note.candidates[0].value);
        if note.candidates.len() < 2 || !distinct {
            report.push(Some(note.field), "conflict has differing candidates");
        }
        if !note.candidates.iter().any(|c| c.value == note.resolution) {
            report.push(Some(note.field), "conflict resolution is a candidate");
        }
    }
    report
}

/// Canonical text encoding: compact JSON with object keys in byte order.
pub fn encode<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

pub fn encode_pretty<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string_pretty(&v)
}

pub fn decode<T: DeserializeOwned>(text: &str) -> Result<T, serde_json::Error> {
    serde_json::from_str(text)
}
