//! On-disk formats: cohort directories, memory journals and KB indexes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use theraloop_core::domain::{encode, encode_pretty, Outcome, PatientRecord};
use theraloop_core::evidence::{parse_document, EvidenceDoc, EvidenceError, EvidenceIndex};
use theraloop_core::memory::{JournalRecord, MemoryError, MemoryStore};
use theraloop_core::pipeline::LabeledCase;
use theraloop_core::synth::{Cohort, Manifest, Tier};

pub const LABELS_FILE: &str = "labels.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Latent truth lives here; nothing on the prediction path reads it.
pub const LATENT_DIR: &str = "latent";
pub const LATENTS_FILE: &str = "latents.jsonl";
pub const DOC_FILES: [&str; 3] = ["pet.txt", "labs.txt", "notes.txt"];
const LABELS_HEADER: &str = "patient_id\tpsa_response\tos_gt_12m\ttier";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Format { path: PathBuf, line: usize, reason: String },
    #[error("case {0} has no documents")]
    EmptyCase(String),
    #[error(transparent)]
    Evidence(#[from] EvidenceError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

pub fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn write(path: &Path, text: &str) -> Result<(), DataError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

// ---------------------------------------------------------------------------
// cohorts

/// Writes the case documents, labels, quarantined latents and manifest.
pub fn write_cohort(dir: &Path, cohort: &Cohort) -> Result<(), DataError> {
    let mut labels = String::from(LABELS_HEADER);
    labels.push('\n');
    let mut latents = String::new();
    for case in &cohort.cases {
        let r = &case.record;
        let case_dir = dir.join("cases").join(&r.patient_id);
        for (name, text) in DOC_FILES.iter().zip([&r.pet_report, &r.lab_report, &r.clinical_notes]) {
            write(&case_dir.join(name), text)?;
        }
        let o = case.latent.outcome;
        labels.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            r.patient_id,
            yes_no(o.psa_response),
            yes_no(o.os_gt_12m),
            case.latent.tier.as_str()
        ));
        latents.push_str(&encode(&case.latent).expect("latent encodes"));
        latents.push('\n');
    }
    write(&dir.join(LABELS_FILE), &labels)?;
    write(&dir.join(LATENT_DIR).join(LATENTS_FILE), &latents)?;
    write(&dir.join(MANIFEST_FILE), &(encode_pretty(&cohort.manifest).expect("manifest encodes") + "\n"))
}

/// One case directory as a record; the directory name is the patient id.
pub fn read_case(dir: &Path) -> Result<PatientRecord, DataError> {
    let pid = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| DataError::EmptyCase(dir.display().to_string()))?;
    let mut docs = Vec::new();
    for name in DOC_FILES {
        let p = dir.join(name);
        docs.push(if p.exists() { read(&p)? } else { String::new() });
    }
    if docs.iter().all(|d| d.trim().is_empty()) {
        return Err(DataError::EmptyCase(pid));
    }
    let mut docs = docs.into_iter();
    Ok(PatientRecord {
        patient_id: pid,
        pet_report: docs.next().unwrap_or_default(),
        lab_report: docs.next().unwrap_or_default(),
        clinical_notes: docs.next().unwrap_or_default(),
        language_hint: None,
    })
}

/// Outcome and optional tier per patient id.
pub fn read_labels(path: &Path) -> Result<BTreeMap<String, (Outcome, Option<Tier>)>, DataError> {
    let text = read(path)?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fail = |reason: String| DataError::Format { path: path.to_path_buf(), line: i + 1, reason };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 {
            return Err(fail(format!("expected at least 3 columns, got {}", cols.len())));
        }
        let flag = |s: &str| match s {
            "yes" => Ok(true),
            "no" => Ok(false),
            other => Err(fail(format!("expected yes/no, got {other:?}"))),
        };
        let outcome = Outcome { psa_response: flag(cols[1])?, os_gt_12m: flag(cols[2])? };
        let tier = match cols.get(3) {
            Some(t) => Some(Tier::parse(t).ok_or_else(|| fail(format!("unknown tier {t:?}")))?),
            None => None,
        };
        if out.insert(cols[0].to_string(), (outcome, tier)).is_some() {
            return Err(fail(format!("duplicate patient {}", cols[0])));
        }
    }
    Ok(out)
}

/// Labelled cases in label-file order (sorted by patient id).
pub fn read_cohort(dir: &Path) -> Result<Vec<LabeledCase>, DataError> {
    read_labels(&dir.join(LABELS_FILE))?
        .into_iter()
        .map(|(pid, (outcome, tier))| Ok(LabeledCase { record: read_case(&dir.join("cases").join(&pid))?, outcome, tier }))
        .collect()
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DataError> {
    let path = dir.join(MANIFEST_FILE);
    serde_json::from_str(&read(&path)?)
        .map_err(|e| DataError::Format { path, line: e.line(), reason: e.to_string() })
}

// ---------------------------------------------------------------------------
// memory journal

/// Replays a JSONL journal; a missing file is an empty store.
pub fn load_memory(path: &Path) -> Result<MemoryStore, DataError> {
    if !path.exists() {
        return Ok(MemoryStore::new());
    }
    let text = read(path)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: JournalRecord = serde_json::from_str(line)
            .map_err(|e| DataError::Format { path: path.to_path_buf(), line: i + 1, reason: e.to_string() })?;
        records.push(rec);
    }
    Ok(MemoryStore::replay(&records)?)
}

pub fn journal_text(records: &[JournalRecord]) -> String {
    records.iter().map(|r| encode(r).expect("journal record encodes") + "\n").collect()
}

/// Rewrites the whole journal file.
pub fn save_memory(path: &Path, store: &MemoryStore) -> Result<(), DataError> {
    write(path, &journal_text(store.journal()))
}

/// Appends records to an existing journal.
pub fn append_journal(path: &Path, records: &[JournalRecord]) -> Result<(), DataError> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    f.write_all(journal_text(records).as_bytes()).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// knowledge base

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub documents: usize,
    pub chunks: usize,
    pub skipped: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexFile {
    pub docs: Vec<EvidenceDoc>,
    pub report: IngestReport,
}

/// Documents from `(doc_id, text)` pairs; malformed ones are skipped and listed.
pub fn ingest_texts<'a>(files: impl IntoIterator<Item = (String, &'a str)>) -> Result<(EvidenceIndex, IndexFile), DataError> {
    let mut docs = Vec::new();
    let mut report = IngestReport::default();
    for (id, text) in files {
        match parse_document(&id, text) {
            Ok(d) => docs.push(d),
            Err(e) => report.skipped.push(e.to_string()),
        }
    }
    let index = EvidenceIndex::build(docs.clone())?;
    report.documents = index.docs().len();
    report.chunks = index.chunk_count();
    Ok((index, IndexFile { docs, report }))
}

/// Every `.txt` file in `dir`, sorted by name; doc ids are file stems.
pub fn ingest_dir(dir: &Path) -> Result<(EvidenceIndex, IndexFile), DataError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    let texts: Vec<(String, String)> = files
        .iter()
        .map(|p| Ok((p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), read(p)?)))
        .collect::<Result<_, DataError>>()?;
    ingest_texts(texts.iter().map(|(id, t)| (id.clone(), t.as_str())))
}

pub fn save_index(path: &Path, file: &IndexFile) -> Result<(), DataError> {
    write(path, &(encode_pretty(file).expect("index encodes") + "\n"))
}

pub fn load_index(path: &Path) -> Result<EvidenceIndex, DataError> {
    let file: IndexFile = serde_json::from_str(&read(path)?)
        .map_err(|e| DataError::Format { path: path.to_path_buf(), line: e.line(), reason: e.to_string() })?;
    Ok(EvidenceIndex::build(file.docs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use theraloop_core::synth::{Generator, TierMix};

    #[test]
    fn cohort_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cohort = Generator::default().generate(20, &TierMix::default(), 8).unwrap();
        write_cohort(dir.path(), &cohort).unwrap();
        let cases = read_cohort(dir.path()).unwrap();
        assert_eq!(cases.len(), 20);
        for (c, orig) in cases.iter().zip(&cohort.cases) {
            assert_eq!(c.record.pet_report, orig.record.pet_report);
            assert_eq!(c.outcome, orig.latent.outcome);
            assert_eq!(c.tier, Some(orig.latent.tier));
        }
        assert_eq!(read_manifest(dir.path()).unwrap(), cohort.manifest);
        assert!(dir.path().join(LATENT_DIR).join(LATENTS_FILE).exists());
    }

    #[test]
    fn bad_labels_are_reported_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.tsv");
        fs::write(&p, "h\nS1\tyes\tmaybe\n").unwrap();
        assert!(matches!(read_labels(&p), Err(DataError::Format { line: 2, .. })));
    }

    #[test]
    fn journal_save_load_append() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        assert!(load_memory(&p).unwrap().is_empty());
        let cohort = Generator::default().generate(5, &TierMix::default(), 1).unwrap();
        let mut store = MemoryStore::new();
        let c0 = &cohort.cases[0];
        store.add_case(c0.latent.true_profile.clone(), c0.latent.outcome).unwrap();
        save_memory(&p, &store).unwrap();
        let mut more = load_memory(&p).unwrap();
        let before = more.journal().len();
        let c1 = &cohort.cases[1];
        more.add_provisional(c1.latent.true_profile.clone()).unwrap();
        append_journal(&p, &more.journal()[before..]).unwrap();
        let back = load_memory(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.entries(), more.entries());
    }

    #[test]
    fn malformed_docs_are_skipped() {
        let (index, file) =
            ingest_texts([("a".to_string(), "title: A\nsource: S\nbody text"), ("b".to_string(), "no header")]).unwrap();
        assert_eq!(index.docs().len(), 1);
        assert_eq!(file.report.skipped.len(), 1);
        assert!(matches!(ingest_texts([("b".to_string(), "no header")]), Err(DataError::Evidence(EvidenceError::EmptyCorpus))));
    }
}
