//! Trial-evidence knowledge base: document chunking, a BM25 index over
//! chunk terms, profile-driven queries and the prognostic factor table.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::domain::{Field, FieldValue, Target, UnifiedProfile};
use crate::grammar;

pub const CHUNK_SIZE: usize = 1200;
pub const CHUNK_OVERLAP: usize = 200;
pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;
pub const DEFAULT_TOP_N: usize = 3;
pub const FACTOR_COUNT: usize = 11;

pub const FACTORS_V1: &str = include_str!("../data/factors.v1.json");

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "in", "is", "it", "of", "on", "or", "the", "to",
    "vs", "was", "were", "with",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceDoc {
    pub doc_id: String,
    pub title: String,
    pub source_tag: String,
    pub body: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceChunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub ordinal: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvidenceError {
    #[error("corpus has no usable documents")]
    EmptyCorpus,
    #[error("document {doc_id}: {reason}")]
    MalformedHeader { doc_id: String, reason: String },
    #[error("duplicate doc_id {0}")]
    DuplicateDoc(String),
    #[error("factor table: {0}")]
    FactorTable(String),
}

/// Parses a corpus file: a `title:` line, a `source:` line, then the body.
pub fn parse_document(doc_id: &str, text: &str) -> Result<EvidenceDoc, EvidenceError> {
    let bad = |reason: &str| EvidenceError::MalformedHeader { doc_id: doc_id.to_string(), reason: reason.to_string() };
    let mut lines = text.splitn(3, '\n');
    let title = lines
        .next()
        .and_then(|l| l.trim_end_matches('\r').strip_prefix("title:"))
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .ok_or_else(|| bad("first line must be `title: ...`"))?;
    let source = lines
        .next()
        .and_then(|l| l.trim_end_matches('\r').strip_prefix("source:"))
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .ok_or_else(|| bad("second line must be `source: ...`"))?;
    let body = lines.next().unwrap_or("").trim();
    if body.is_empty() {
        return Err(bad("body is empty"));
    }
    Ok(EvidenceDoc {
        doc_id: doc_id.to_string(),
        title: title.to_string(),
        source_tag: source.to_string(),
        body: body.to_string(),
    })
}

fn is_sentence_end(chars: &[char], i: usize) -> bool {
    // a boundary sits right after `.!?` followed by whitespace, or after a newline
    chars[i] == '\n' || (matches!(chars[i], '.' | '!' | '?') && chars.get(i + 1).is_some_and(|c| c.is_whitespace()))
}

/// Splits `body` into chunks of at most `size` chars. Consecutive chunks
/// share exactly `overlap` chars. A chunk ends after the last sentence
/// boundary past its midpoint when there is one.
pub fn chunk_text(body: &str, size: usize, overlap: usize) -> Vec<String> {
    assert!(overlap * 2 < size, "overlap must be under half the chunk size");
    let chars: Vec<char> = body.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        if chars.len() - start <= size {
            out.push(chars[start..].iter().collect());
            return out;
        }
        let hard_end = start + size;
        let floor = start + size / 2;
        let end = (floor..hard_end).rev().find(|&i| is_sentence_end(&chars, i)).map_or(hard_end, |i| i + 1);
        out.push(chars[start..end].iter().collect());
        start = end - overlap;
    }
}

/// Inverse of [`chunk_text`].
pub fn reconstruct(chunks: &[String], overlap: usize) -> String {
    let mut out = String::new();
    for (i, c) in chunks.iter().enumerate() {
        if i == 0 {
            out.push_str(c);
        } else {
            out.extend(c.chars().skip(overlap));
        }
    }
    out
}

pub fn chunk_document(doc: &EvidenceDoc) -> Vec<EvidenceChunk> {
    chunk_text(&doc.body, CHUNK_SIZE, CHUNK_OVERLAP)
        .into_iter()
        .enumerate()
        .map(|(ordinal, text)| EvidenceChunk {
            chunk_id: format!("{}#{}", doc.doc_id, ordinal),
            doc_id: doc.doc_id.clone(),
            ordinal,
            text,
        })
        .collect()
}

/// Lower-cased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Query terms: tokens minus stopwords, first occurrence kept.
pub fn query_terms(query: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    tokenize(query)
        .into_iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredChunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub source_tag: String,
    pub score: f64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexedChunk {
    chunk: EvidenceChunk,
    length: u32,
    terms: BTreeMap<String, u32>,
}

/// Immutable BM25 index over evidence chunks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceIndex {
    docs: Vec<EvidenceDoc>,
    chunks: Vec<IndexedChunk>,
    df: BTreeMap<String, u32>,
    avg_len: f64,
}

impl EvidenceIndex {
    /// Builds the index; documents are ordered by doc_id.
    pub fn build(mut docs: Vec<EvidenceDoc>) -> Result<EvidenceIndex, EvidenceError> {
        if docs.is_empty() {
            return Err(EvidenceError::EmptyCorpus);
        }
        docs.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        if let Some(w) = docs.windows(2).find(|w| w[0].doc_id == w[1].doc_id) {
            return Err(EvidenceError::DuplicateDoc(w[0].doc_id.clone()));
        }
        let mut chunks = Vec::new();
        let mut df: BTreeMap<String, u32> = BTreeMap::new();
        for doc in &docs {
            for chunk in chunk_document(doc) {
                let tokens = tokenize(&chunk.text);
                let mut terms: BTreeMap<String, u32> = BTreeMap::new();
                for t in &tokens {
                    *terms.entry(t.clone()).or_default() += 1;
                }
                for t in terms.keys() {
                    *df.entry(t.clone()).or_default() += 1;
                }
                chunks.push(IndexedChunk { chunk, length: tokens.len() as u32, terms });
            }
        }
        let total: u64 = chunks.iter().map(|c| u64::from(c.length)).sum();
        let avg_len = total as f64 / chunks.len() as f64;
        Ok(EvidenceIndex { docs, chunks, df, avg_len })
    }

    pub fn docs(&self) -> &[EvidenceDoc] {
        &self.docs
    }

    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    pub fn chunks(&self) -> impl Iterator<Item = &EvidenceChunk> {
        self.chunks.iter().map(|c| &c.chunk)
    }

    pub fn chunk(&self, chunk_id: &str) -> Option<&EvidenceChunk> {
        self.chunks().find(|c| c.chunk_id == chunk_id)
    }

    pub fn document_frequency(&self, term: &str) -> u32 {
        self.df.get(term).copied().unwrap_or(0)
    }

    fn source_tag(&self, doc_id: &str) -> &str {
        self.docs.iter().find(|d| d.doc_id == doc_id).map_or("", |d| d.source_tag.as_str())
    }

    fn idf(&self, term: &str) -> f64 {
        let n = self.chunks.len() as f64;
        let df = f64::from(self.document_frequency(term));
        libm::log(1.0 + (n - df + 0.5) / (df + 0.5))
    }

    /// BM25 ranking; chunks matching no query term are left out. Ties go
    /// to the smaller chunk_id.
    pub fn retrieve(&self, query: &str, top_n: usize) -> Vec<ScoredChunk> {
        let terms = query_terms(query);
        let idf: Vec<f64> = terms.iter().map(|t| self.idf(t)).collect();
        let mut scored: Vec<(f64, &IndexedChunk)> = Vec::new();
        for c in &self.chunks {
            let norm = BM25_K1 * (1.0 - BM25_B + BM25_B * f64::from(c.length) / self.avg_len);
            let mut score = 0.0;
            let mut hit = false;
            for (t, w) in terms.iter().zip(&idf) {
                if let Some(&tf) = c.terms.get(t) {
                    let tf = f64::from(tf);
                    score += w * tf * (BM25_K1 + 1.0) / (tf + norm);
                    hit = true;
                }
            }
            if hit {
                scored.push((score, c));
            }
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.chunk.chunk_id.cmp(&b.1.chunk.chunk_id)));
        scored
            .into_iter()
            .take(top_n.max(1))
            .map(|(score, c)| ScoredChunk {
                chunk_id: c.chunk.chunk_id.clone(),
                doc_id: c.chunk.doc_id.clone(),
                source_tag: self.source_tag(&c.chunk.doc_id).to_string(),
                score,
                text: c.chunk.text.clone(),
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// prognostic factors

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Favorable,
    Unfavorable,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Favorable => 1.0,
            Direction::Unfavorable => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Effect {
    ResponseRate(f64),
    HazardRatio(f64),
}

/// What a field value must satisfy for a factor to apply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Categorical equality, in profile spelling (`high`, `yes`, ...).
    Equals(String),
    AtLeast(f64),
    Above(f64),
    Below(f64),
}

impl Condition {
    pub fn holds(&self, value: &FieldValue) -> bool {
        let number = match value {
            FieldValue::Decimal(v) => Some(*v),
            FieldValue::Count(v) => Some(f64::from(*v)),
            _ => None,
        };
        match (self, number) {
            (Condition::Equals(want), _) => value.to_string() == *want,
            (Condition::AtLeast(t), Some(v)) => v >= *t,
            (Condition::Above(t), Some(v)) => v > *t,
            (Condition::Below(t), Some(v)) => v < *t,
            _ => false,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Condition::Equals(v) => format!("= {v}"),
            Condition::AtLeast(t) => format!(">= {t}"),
            Condition::Above(t) => format!("> {t}"),
            Condition::Below(t) => format!("< {t}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorCitation {
    pub source_tag: String,
    pub locator: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrognosticFactor {
    pub factor_id: String,
    pub field: Field,
    pub condition: Condition,
    pub target: Target,
    pub direction: Direction,
    /// `None` for direction-only rows.
    #[serde(default)]
    pub effect: Option<Effect>,
    pub citation: FactorCitation,
    /// Corpus query issued when the profile knows `field`.
    pub query: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorTable {
    pub version: String,
    pub factors: Vec<PrognosticFactor>,
}

impl FactorTable {
    /// Parses and validates a factor table document.
    pub fn parse(text: &str) -> Result<FactorTable, EvidenceError> {
        let table: FactorTable = serde_json::from_str(text).map_err(|e| EvidenceError::FactorTable(e.to_string()))?;
        table.validate()?;
        Ok(table)
    }

    /// The table shipped with the crate.
    pub fn shipped() -> FactorTable {
        FactorTable::parse(FACTORS_V1).expect("shipped factor table is valid")
    }

    pub fn validate(&self) -> Result<(), EvidenceError> {
        let err = |m: String| Err(EvidenceError::FactorTable(m));
        if self.factors.len() != FACTOR_COUNT {
            return err(format!("expected {FACTOR_COUNT} rows, found {}", self.factors.len()));
        }
        let mut ids = BTreeSet::new();
        for f in &self.factors {
            if !ids.insert(f.factor_id.as_str()) {
                return err(format!("duplicate factor_id {}", f.factor_id));
            }
            if let Condition::Equals(v) = &f.condition {
                match grammar::parse_value(f.field, v) {
                    Ok(Some(_)) => {}
                    _ => return err(format!("{}: {v:?} is not a known value of {}", f.factor_id, f.field)),
                }
            }
            match f.effect {
                Some(Effect::HazardRatio(h)) if !(h > 0.0 && h.is_finite()) => {
                    return err(format!("{}: hazard ratio must be positive", f.factor_id));
                }
                Some(Effect::ResponseRate(r)) if !(0.0..=1.0).contains(&r) => {
                    return err(format!("{}: response rate must lie in [0,1]", f.factor_id));
                }
                _ => {}
            }
            if f.query.trim().is_empty() {
                return err(format!("{}: empty query", f.factor_id));
            }
        }
        Ok(())
    }

    pub fn get(&self, factor_id: &str) -> Option<&PrognosticFactor> {
        self.factors.iter().find(|f| f.factor_id == factor_id)
    }

    /// Every factor whose condition the profile satisfies, in table order.
    /// Unknown fields never match.
    pub fn matches(&self, profile: &UnifiedProfile) -> Vec<FactorMatch> {
        self.factors
            .iter()
            .filter_map(|f| {
                let value = profile.get(f.field)?;
                f.condition.holds(&value).then(|| FactorMatch { factor: f.clone(), observed: value.to_string() })
            })
            .collect()
    }

    /// One query per known profile field that some factor refers to, in
    /// factor order, deduplicated.
    pub fn build_queries(&self, profile: &UnifiedProfile) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for f in &self.factors {
            if profile.get(f.field).is_some() && !out.contains(&f.query) {
                out.push(f.query.clone());
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorMatch {
    pub factor: PrognosticFactor,
    /// The profile value that satisfied the condition.
    pub observed: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Features, PsmaExpression, TriState};
    use proptest::prelude::*;
    use std::string::ToString;

    fn doc(id: &str, body: &str) -> EvidenceDoc {
        EvidenceDoc { doc_id: id.into(), title: "t".into(), source_tag: "S".into(), body: body.into() }
    }

    #[test]
    fn header_parsing() {
        let d = parse_document("x", "title: A trial\nsource: VISION\nBody text.").unwrap();
        assert_eq!((d.title.as_str(), d.source_tag.as_str(), d.body.as_str()), ("A trial", "VISION", "Body text."));
        assert!(matches!(parse_document("x", "source: a\ntitle: b\nc"), Err(EvidenceError::MalformedHeader { .. })));
        assert!(matches!(parse_document("x", "title: a\nsource: b\n  "), Err(EvidenceError::MalformedHeader { .. })));
    }

    #[test]
    fn chunk_counts() {
        let short = "x".repeat(1000);
        assert_eq!(chunk_document(&doc("d", &short)).len(), 1);
        let long = "x".repeat(2500);
        let chunks = chunk_document(&doc("d", &long));
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[2].chunk_id, "d#2");
        let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
        assert!(texts[0].chars().rev().take(200).eq(texts[1].chars().take(200).collect::<Vec<_>>().into_iter().rev()));
        assert_eq!(reconstruct(&texts, CHUNK_OVERLAP), long);
    }

    #[test]
    fn chunks_prefer_sentence_ends() {
        let sentence = "Patients with liver involvement did worse. ";
        let body = sentence.repeat(80);
        let chunks = chunk_text(&body, CHUNK_SIZE, CHUNK_OVERLAP);
        assert!(chunks[0].ends_with('.'));
        assert!(chunks[0].chars().count() <= CHUNK_SIZE);
        assert_eq!(reconstruct(&chunks, CHUNK_OVERLAP), body);
    }

    #[test]
    fn tokenizer_and_terms() {
        assert_eq!(tokenize("VISION: liver metastasis HR=2.1"), ["vision", "liver", "metastasis", "hr", "2", "1"]);
        assert_eq!(query_terms("PSMA expression and PSA response, PSMA"), ["psma", "expression", "psa", "response"]);
    }

    #[test]
    fn retrieval_basics() {
        let index = EvidenceIndex::build(vec![
            doc("a", "Liver metastasis HR=2.1 for overall survival."),
            doc("b", "High PSMA uptake achieved 66% PSA response."),
        ])
        .unwrap();
        let top = index.retrieve("liver metastasis prognosis", 3);
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].chunk_id, "a#0");
        assert!(index.retrieve("zebra quantum", 3).is_empty());
        assert_eq!(EvidenceIndex::build(vec![]), Err(EvidenceError::EmptyCorpus));
    }

    fn profile(psma: PsmaExpression, liver: TriState, visceral: TriState) -> UnifiedProfile {
        let mut f = Features::default();
        f.radiology.psma_expression = psma;
        f.radiology.liver_met = liver;
        f.radiology.visceral_met = visceral;
        UnifiedProfile::with_uniform_provenance("p", f, 1.0)
    }

    #[test]
    fn shipped_table_rows() {
        let t = FactorTable::shipped();
        assert_eq!(t.factors.len(), 11);
        let high = t.matches(&profile(PsmaExpression::High, TriState::Unknown, TriState::Unknown));
        assert_eq!(high.len(), 1);
        assert_eq!(high[0].factor.effect, Some(Effect::ResponseRate(0.66)));
        let low = t.matches(&profile(PsmaExpression::Low, TriState::Unknown, TriState::Unknown));
        assert_eq!(low[0].factor.effect, Some(Effect::ResponseRate(0.37)));
        let liver = t.matches(&profile(PsmaExpression::Unknown, TriState::Yes, TriState::Yes));
        assert_eq!(liver.len(), 1);
        assert_eq!((liver[0].factor.target, liver[0].factor.effect), (Target::OsGt12m, Some(Effect::HazardRatio(2.1))));
        let bone_only = t.matches(&profile(PsmaExpression::Unknown, TriState::No, TriState::No));
        let hrs: Vec<_> = bone_only.iter().map(|m| (m.factor.direction, m.factor.effect)).collect();
        assert!(hrs.contains(&(Direction::Favorable, Some(Effect::HazardRatio(0.67)))));
        assert!(hrs.contains(&(Direction::Favorable, Some(Effect::HazardRatio(0.48)))));
        assert!(t.matches(&UnifiedProfile::default()).is_empty());
    }

    #[test]
    fn queries_from_profile() {
        let t = FactorTable::shipped();
        let q = t.build_queries(&profile(PsmaExpression::High, TriState::Yes, TriState::Yes));
        assert!(q.contains(&"PSMA expression and PSA response".to_string()));
        assert!(q.contains(&"liver metastasis prognosis".to_string()));
        let again = t.build_queries(&profile(PsmaExpression::High, TriState::Yes, TriState::Yes));
        assert_eq!(q, again);
        assert!(t.build_queries(&UnifiedProfile::default()).is_empty());
    }

    #[test]
    fn table_validation_rejects_bad_rows() {
        let mut t = FactorTable::shipped();
        t.factors[2].effect = Some(Effect::HazardRatio(0.0));
        assert!(t.validate().is_err());
        let mut t = FactorTable::shipped();
        t.factors[0].condition = Condition::Equals("enormous".into());
        assert!(t.validate().is_err());
        let mut t = FactorTable::shipped();
        t.factors.pop();
        assert!(t.validate().is_err());
        assert!(FactorTable::parse(&FACTORS_V1.replace("\"psma_expression\"", "\"psma_level\"")).is_err());
    }

    proptest! {
        #[test]
        fn chunking_reconstructs(body in "[a-z .!?\n]{0,4000}", size in 300usize..1500) {
            let overlap = size / 6;
            let chunks = chunk_text(&body, size, overlap);
            prop_assert!(chunks.iter().all(|c| c.chars().count() <= size));
            prop_assert_eq!(reconstruct(&chunks, overlap), body);
        }
    }
}
