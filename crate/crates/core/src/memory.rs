//! Case memory: stored (profile, outcome) entries, subgroup pattern mining,
//! weighted-similarity retrieval and outcome updates.
//!
//! Every mutation appends a [`JournalRecord`]; replaying the journal rebuilds
//! the store. Patterns are refreshed only by [`MemoryStore::mine`].

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::domain::{
    index_key, validate_profile, IndexKey, Outcome, PsmaExpression, Target, TriState, TumorBurden, UnifiedProfile,
};

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_MIN_SUPPORT: u32 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub entry_id: String,
    pub profile: UnifiedProfile,
    /// `None` while the case is provisional.
    pub outcome: Option<Outcome>,
    pub key: IndexKey,
    pub added_at: u64,
}

impl MemoryEntry {
    pub fn patient_id(&self) -> &str {
        &self.profile.patient_id
    }
}

pub fn entry_id_for(patient_id: &str) -> String {
    format!("mem:{patient_id}")
}

/// Required values over a subset of the index fields. `None` leaves a field
/// unconstrained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Predicate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psma_level: Option<PsmaExpression>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub liver_met: Option<TriState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lung_met: Option<TriState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_chemo: Option<TriState>,
}

impl Predicate {
    pub fn is_empty(&self) -> bool {
        self.psma_level.is_none() && self.liver_met.is_none() && self.lung_met.is_none() && self.prior_chemo.is_none()
    }

    /// Unknown key values never satisfy a constrained field.
    pub fn matches(&self, key: &IndexKey) -> bool {
        fn ok<T: PartialEq>(want: Option<T>, have: T, known: bool) -> bool {
            want.is_none_or(|w| known && w == have)
        }
        ok(self.psma_level, key.psma_level, key.psma_level.is_known())
            && ok(self.liver_met, key.liver_met, key.liver_met.is_known())
            && ok(self.lung_met, key.lung_met, key.lung_met.is_known())
            && ok(self.prior_chemo, key.prior_chemo, key.prior_chemo.is_known())
    }

    /// The predicate over the fields selected by `mask` (bit 0 psma, 1 liver,
    /// 2 lung, 3 prior chemo), or `None` if one of them is unknown in `key`.
    pub fn project(key: &IndexKey, mask: u8) -> Option<Predicate> {
        let mut p = Predicate::default();
        if mask & 1 != 0 {
            p.psma_level = Some(key.psma_level).filter(|v| v.is_known());
            p.psma_level?;
        }
        if mask & 2 != 0 {
            p.liver_met = Some(key.liver_met).filter(|v| v.is_known());
            p.liver_met?;
        }
        if mask & 4 != 0 {
            p.lung_met = Some(key.lung_met).filter(|v| v.is_known());
            p.lung_met?;
        }
        if mask & 8 != 0 {
            p.prior_chemo = Some(key.prior_chemo).filter(|v| v.is_known());
            p.prior_chemo?;
        }
        Some(p)
    }

    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if let Some(v) = self.psma_level {
            parts.push(format!("psma_level={}", v.as_str()));
        }
        if let Some(v) = self.liver_met {
            parts.push(format!("liver_met={}", v.as_str()));
        }
        if let Some(v) = self.lung_met {
            parts.push(format!("lung_met={}", v.as_str()));
        }
        if let Some(v) = self.prior_chemo {
            parts.push(format!("prior_chemo={}", v.as_str()));
        }
        parts.join(" & ")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub predicate: Predicate,
    pub target: Target,
    pub support: u32,
    pub positives: u32,
    pub rate: f64,
}

impl Pattern {
    pub fn describe(&self) -> String {
        format!(
            "{} -> {} {}/{} ({:.1}%)",
            self.predicate.describe(),
            self.target,
            self.positives,
            self.support,
            self.rate * 100.0
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCase {
    pub entry: MemoryEntry,
    pub similarity: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub cases: Vec<ScoredCase>,
    pub matched_patterns: Vec<Pattern>,
    pub p_case: BTreeMap<Target, f64>,
}

impl RetrievalResult {
    /// `(positives, resolved)` over the retrieved cases that have outcomes.
    pub fn outcome_counts(&self, target: Target) -> (u32, u32) {
        let mut pos = 0;
        let mut n = 0;
        for c in &self.cases {
            if let Some(o) = c.entry.outcome {
                n += 1;
                pos += u32::from(o.get(target));
            }
        }
        (pos, n)
    }
}

/// Per-feature weights of the similarity measure.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimilarityWeights {
    pub psma_expression: f64,
    pub liver_met: f64,
    pub lung_met: f64,
    pub visceral_met: f64,
    pub prior_chemo: f64,
    pub ecog: f64,
    pub bone_met: f64,
    pub tumor_burden: f64,
    pub psa_band: f64,
    pub alp_band: f64,
    pub hemoglobin_band: f64,
}

impl Default for SimilarityWeights {
    fn default() -> Self {
        SimilarityWeights {
            psma_expression: 3.0,
            liver_met: 2.0,
            lung_met: 2.0,
            visceral_met: 2.0,
            prior_chemo: 2.0,
            ecog: 1.0,
            bone_met: 1.0,
            tumor_burden: 1.0,
            psa_band: 1.0,
            alp_band: 1.0,
            hemoglobin_band: 1.0,
        }
    }
}

/// PSA band: below 10, 10 to 100, above 100 ng/mL.
pub fn psa_band(psa: f64) -> u8 {
    if psa < 10.0 {
        0
    } else if psa <= 100.0 {
        1
    } else {
        2
    }
}

/// ALP band: up to 129, above 129 U/L.
pub fn alp_band(alp: f64) -> u8 {
    u8::from(alp > 129.0)
}

/// Hemoglobin band: below 10, 10 to 12, above 12 g/dL.
pub fn hemoglobin_band(hb: f64) -> u8 {
    if hb < 10.0 {
        0
    } else if hb <= 12.0 {
        1
    } else {
        2
    }
}

fn known_tri(t: TriState) -> Option<TriState> {
    Some(t).filter(|t| t.is_known())
}

fn known_burden(t: TumorBurden) -> Option<TumorBurden> {
    Some(t).filter(|t| t.is_known())
}

/// Weighted feature agreement over the features both profiles know.
/// 0 when no feature is mutually known.
pub fn similarity_with(a: &UnifiedProfile, b: &UnifiedProfile, w: &SimilarityWeights) -> f64 {
    let (ra, rb) = (a.radiology(), b.radiology());
    let (la, lb) = (a.labs(), b.labs());
    let (ca, cb) = (a.clinical(), b.clinical());
    let mut num = 0.0;
    let mut den = 0.0;
    let mut add = |weight: f64, pair: Option<bool>| {
        if let Some(m) = pair {
            den += weight;
            if m {
                num += weight;
            }
        }
    };
    fn eq<T: PartialEq>(x: Option<T>, y: Option<T>) -> Option<bool> {
        Some(x? == y?)
    }
    let psma = |p: PsmaExpression| Some(p).filter(|p| p.is_known());
    add(w.psma_expression, eq(psma(ra.psma_expression), psma(rb.psma_expression)));
    add(w.liver_met, eq(known_tri(ra.liver_met), known_tri(rb.liver_met)));
    add(w.lung_met, eq(known_tri(ra.lung_met), known_tri(rb.lung_met)));
    add(w.visceral_met, eq(known_tri(ra.visceral_met), known_tri(rb.visceral_met)));
    add(w.prior_chemo, eq(known_tri(ca.prior_chemo), known_tri(cb.prior_chemo)));
    add(w.ecog, ca.ecog.zip(cb.ecog).map(|(x, y)| x.abs_diff(y) <= 1));
    add(w.bone_met, eq(known_tri(ra.bone_met), known_tri(rb.bone_met)));
    add(w.tumor_burden, eq(known_burden(ra.tumor_burden), known_burden(rb.tumor_burden)));
    add(w.psa_band, eq(la.psa.map(psa_band), lb.psa.map(psa_band)));
    add(w.alp_band, eq(la.alp.map(alp_band), lb.alp.map(alp_band)));
    add(w.hemoglobin_band, eq(la.hemoglobin.map(hemoglobin_band), lb.hemoglobin.map(hemoglobin_band)));
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

pub fn similarity(a: &UnifiedProfile, b: &UnifiedProfile) -> f64 {
    similarity_with(a, b, &SimilarityWeights::default())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum JournalRecord {
    Add { entry: Box<MemoryEntry> },
    Update { patient_id: String, outcome: Outcome },
    Compact { entries: usize },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MemoryError {
    #[error("patient {0} is already stored")]
    DuplicatePatient(String),
    #[error("patient {0} is not stored and no profile was supplied")]
    UnknownPatient(String),
    #[error("patient {0} already has an outcome")]
    AlreadyResolved(String),
    #[error("profile for {patient_id} failed validation: {violations:?}")]
    InvalidProfile { patient_id: String, violations: Vec<String> },
    #[error("journal record {index}: {reason}")]
    Replay { index: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryStats {
    pub entries: usize,
    pub provisional: usize,
    pub patterns: usize,
    pub base_rates: BTreeMap<Target, Option<f64>>,
}

/// The case store. Cloning yields an independent snapshot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemoryStore {
    entries: Vec<MemoryEntry>,
    by_patient: BTreeMap<String, usize>,
    next_seq: u64,
    patterns: Vec<Pattern>,
    journal: Vec<JournalRecord>,
    pub weights: SimilarityWeights,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn get(&self, patient_id: &str) -> Option<&MemoryEntry> {
        self.by_patient.get(patient_id).map(|i| &self.entries[*i])
    }

    pub fn patterns(&self) -> &[Pattern] {
        &self.patterns
    }

    /// Every record since creation or the last compaction.
    pub fn journal(&self) -> &[JournalRecord] {
        &self.journal
    }

    fn insert(&mut self, profile: UnifiedProfile, outcome: Option<Outcome>) -> Result<MemoryEntry, MemoryError> {
        let pid = profile.patient_id.clone();
        if self.by_patient.contains_key(&pid) {
            return Err(MemoryError::DuplicatePatient(pid));
        }
        let report = validate_profile(&profile);
        if !report.is_ok() {
            return Err(MemoryError::InvalidProfile {
                patient_id: pid,
                violations: report.violations.into_iter().map(|v| v.rule).collect(),
            });
        }
        let entry = MemoryEntry {
            entry_id: entry_id_for(&pid),
            key: index_key(&profile),
            profile,
            outcome,
            added_at: self.next_seq,
        };
        self.next_seq += 1;
        self.by_patient.insert(pid, self.entries.len());
        self.entries.push(entry.clone());
        self.journal.push(JournalRecord::Add { entry: Box::new(entry.clone()) });
        Ok(entry)
    }

    /// Stores a case with a known outcome.
    pub fn add_case(&mut self, profile: UnifiedProfile, outcome: Outcome) -> Result<MemoryEntry, MemoryError> {
        self.insert(profile, Some(outcome))
    }

    /// Stores a case whose outcome is not yet known.
    pub fn add_provisional(&mut self, profile: UnifiedProfile) -> Result<MemoryEntry, MemoryError> {
        self.insert(profile, None)
    }

    /// Records an outcome for a provisional case, or adds the case when it
    /// is absent and a profile is supplied.
    pub fn update_with_outcome(
        &mut self,
        patient_id: &str,
        outcome: Outcome,
        profile: Option<UnifiedProfile>,
    ) -> Result<(), MemoryError> {
        match self.by_patient.get(patient_id) {
            Some(&i) => {
                let entry = &mut self.entries[i];
                if entry.outcome.is_some() {
                    return Err(MemoryError::AlreadyResolved(patient_id.to_string()));
                }
                entry.outcome = Some(outcome);
                self.journal.push(JournalRecord::Update { patient_id: patient_id.to_string(), outcome });
                Ok(())
            }
            None => match profile {
                Some(p) if p.patient_id == patient_id => self.insert(p, Some(outcome)).map(|_| ()),
                _ => Err(MemoryError::UnknownPatient(patient_id.to_string())),
            },
        }
    }

    /// Refreshes the stored patterns and returns them.
    pub fn mine(&mut self, min_support: u32) -> &[Pattern] {
        self.patterns = mine_patterns(&self.entries, min_support);
        &self.patterns
    }

    /// Memory-wide outcome rate over resolved entries.
    pub fn base_rate(&self, target: Target) -> Option<f64> {
        let resolved: Vec<Outcome> = self.entries.iter().filter_map(|e| e.outcome).collect();
        if resolved.is_empty() {
            return None;
        }
        let pos = resolved.iter().filter(|o| o.get(target)).count();
        Some(pos as f64 / resolved.len() as f64)
    }

    pub fn stats(&self) -> MemoryStats {
        MemoryStats {
            entries: self.entries.len(),
            provisional: self.entries.iter().filter(|e| e.outcome.is_none()).count(),
            patterns: self.patterns.len(),
            base_rates: Target::ALL.into_iter().map(|t| (t, self.base_rate(t))).collect(),
        }
    }

    /// Top-`k` cases by similarity to `query`, older entries first on ties.
    /// The query patient itself is never returned.
    pub fn retrieve_similar(&self, query: &UnifiedProfile, k: usize) -> RetrievalResult {
        let mut scored: Vec<(f64, &MemoryEntry)> = self
            .entries
            .iter()
            .filter(|e| e.profile.patient_id != query.patient_id)
            .map(|e| (similarity_with(query, &e.profile, &self.weights), e))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.added_at.cmp(&b.1.added_at)));
        scored.truncate(k.max(1));
        let cases: Vec<ScoredCase> = scored
            .into_iter()
            .map(|(similarity, e)| ScoredCase { entry: e.clone(), similarity })
            .collect();
        let key = index_key(query);
        let matched_patterns = self.patterns.iter().filter(|p| p.predicate.matches(&key)).cloned().collect();
        let mut result = RetrievalResult { cases, matched_patterns, p_case: BTreeMap::new() };
        for t in Target::ALL {
            let (pos, n) = result.outcome_counts(t);
            if n > 0 {
                result.p_case.insert(t, f64::from(pos) / f64::from(n));
            }
        }
        result
    }

    /// Rewrites the journal as one compact marker followed by one add
    /// record per entry, with outcomes folded in.
    pub fn compact(&mut self) {
        let mut journal = Vec::with_capacity(self.entries.len() + 1);
        journal.push(JournalRecord::Compact { entries: self.entries.len() });
        journal.extend(self.entries.iter().map(|e| JournalRecord::Add { entry: Box::new(e.clone()) }));
        self.journal = journal;
    }

    /// Rebuilds a store from journal records.
    pub fn replay<'a, I>(records: I) -> Result<MemoryStore, MemoryError>
    where
        I: IntoIterator<Item = &'a JournalRecord>,
    {
        let mut store = MemoryStore::new();
        for (index, rec) in records.into_iter().enumerate() {
            let fail = |reason: String| MemoryError::Replay { index, reason };
            match rec {
                JournalRecord::Add { entry } => {
                    let pid = entry.patient_id().to_string();
                    if store.by_patient.contains_key(&pid) {
                        return Err(fail(format!("duplicate patient {pid}")));
                    }
                    if entry.key != index_key(&entry.profile) || entry.entry_id != entry_id_for(&pid) {
                        return Err(fail(format!("inconsistent entry {}", entry.entry_id)));
                    }
                    store.next_seq = store.next_seq.max(entry.added_at + 1);
                    store.by_patient.insert(pid, store.entries.len());
                    store.entries.push((**entry).clone());
                }
                JournalRecord::Update { patient_id, outcome } => {
                    let i = *store
                        .by_patient
                        .get(patient_id)
                        .ok_or_else(|| fail(format!("update for unknown patient {patient_id}")))?;
                    store.entries[i].outcome = Some(*outcome);
                }
                JournalRecord::Compact { .. } => {
                    if index != 0 {
                        return Err(fail("compact marker must come first".to_string()));
                    }
                }
            }
            store.journal.push(rec.clone());
        }
        Ok(store)
    }
}

/// Every pattern over the 15 non-empty predicates whose matching resolved
/// entries number at least `min_support`. Order: predicate mask, then
/// predicate values, then target.
pub fn mine_patterns(entries: &[MemoryEntry], min_support: u32) -> Vec<Pattern> {
    let min_support = min_support.max(1);
    let mut out = Vec::new();
    for mask in 1u8..16 {
        let mut groups: BTreeMap<Predicate, [u32; 3]> = BTreeMap::new();
        for e in entries {
            let Some(outcome) = e.outcome else { continue };
            let Some(pred) = Predicate::project(&e.key, mask) else { continue };
            let g = groups.entry(pred).or_default();
            g[0] += 1;
            g[1] += u32::from(outcome.psa_response);
            g[2] += u32::from(outcome.os_gt_12m);
        }
        for (predicate, [support, psa, os]) in groups {
            if support < min_support {
                continue;
            }
            for (target, positives) in [(Target::PsaResponse, psa), (Target::OsGt12m, os)] {
                out.push(Pattern {
                    predicate,
                    target,
                    support,
                    positives,
                    rate: f64::from(positives) / f64::from(support),
                });
            }
        }
    }
    out
}
