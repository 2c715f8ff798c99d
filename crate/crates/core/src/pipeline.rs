//! End-to-end orchestration: extraction, integration, memory and evidence
//! retrieval, reasoning, fold evaluation and ablations.
//!
//! Parallelism is injected through [`Runner`] so the std crate can fan
//! patients out over threads while results stay in input order.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::consensus::{self, IntegrationMode};
use crate::domain::{encode, Outcome, PatientRecord, Target, UnifiedProfile};
use crate::evidence::{EvidenceIndex, FactorTable, DEFAULT_TOP_N};
use crate::extraction::{self, ExtractionConfig, ExtractionError};
use crate::gateway::{Gateway, GatewayConfig};
use crate::memory::{MemoryError, MemoryStore, RetrievalResult, DEFAULT_K, DEFAULT_MIN_SUPPORT};
use crate::metrics::{self, Metrics, MetricsError};
use crate::reasoning::{
    self, supplied_refs, validate_citations, Citation, CitationKind, Passage, Prediction, PredictionMode, ReasonConfig,
    TrialEvidence,
};
use crate::synth::{sha256_hex, Tier};

pub const DEFAULT_FOLDS: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub disable_multi_expert: bool,
    pub disable_sea_mem: bool,
    pub disable_evidence: bool,
}

impl Ablation {
    pub fn is_full(&self) -> bool {
        *self == Ablation::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub gateway: GatewayConfig,
    pub extraction: ExtractionConfig,
    pub integration: IntegrationMode,
    pub reasoning: PredictionMode,
    pub memory_path: Option<String>,
    pub index_path: Option<String>,
    pub k: usize,
    pub top_n: usize,
    pub min_support: u32,
    pub reason: ReasonConfig,
    pub ablation: Ablation,
    pub folds: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gateway: GatewayConfig::default(),
            extraction: ExtractionConfig::default(),
            integration: IntegrationMode::Deterministic,
            reasoning: PredictionMode::Deterministic,
            memory_path: None,
            index_path: None,
            k: DEFAULT_K,
            top_n: DEFAULT_TOP_N,
            min_support: DEFAULT_MIN_SUPPORT,
            reason: ReasonConfig::default(),
            ablation: Ablation::default(),
            folds: DEFAULT_FOLDS,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Hex SHA-256 of the canonical encoding.
    pub fn hash(&self) -> String {
        sha256_hex(encode(self).expect("config encodes").as_bytes())
    }

    pub fn with_ablation(&self, ablation: Ablation) -> RunConfig {
        RunConfig { ablation, ..self.clone() }
    }
}

/// Read-only resources shared by every patient in a run.
#[derive(Clone, Copy)]
pub struct Stores<'a> {
    pub memory: &'a MemoryStore,
    pub index: &'a EvidenceIndex,
    pub factors: &'a FactorTable,
    pub gateway: &'a Gateway,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Extraction,
    Integration,
    Memory,
    Reasoning,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error("{patient_id}: {stage:?} stage failed: {message}")]
    Stage { patient_id: String, stage: Stage, message: String },
    #[error("{patient_id}: gateway failed: {message}")]
    Gateway { patient_id: String, message: String },
    #[error("evaluation patients are also in memory: {0:?}")]
    Leakage(Vec<String>),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// Everything one patient produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientResult {
    pub patient_id: String,
    pub profile: UnifiedProfile,
    pub predictions: Vec<Prediction>,
    /// Citations that do not resolve against the supplied sources.
    pub unresolved: Vec<Citation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extraction_errors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
}

fn stage_err(patient_id: &str, stage: Stage, e: impl ToString) -> PipelineError {
    PipelineError::Stage { patient_id: patient_id.to_string(), stage, message: e.to_string() }
}

/// Extraction plus integration, honouring the multi-expert ablation.
pub fn build_profile(record: &PatientRecord, cfg: &RunConfig, gateway: &Gateway) -> Result<(UnifiedProfile, Vec<String>), PipelineError> {
    let pid = &record.patient_id;
    if cfg.ablation.disable_multi_expert {
        let (features, confidence) = extraction::extract_combined(record, &cfg.extraction, gateway).map_err(|e| match e {
            ExtractionError::Gateway { .. } => PipelineError::Gateway { patient_id: pid.clone(), message: e.to_string() },
            e => stage_err(pid, Stage::Extraction, e),
        })?;
        return Ok((consensus::from_single_extractor(pid, features, confidence), Vec::new()));
    }
    let set = extraction::extract_all(record, &cfg.extraction, gateway);
    let errors: Vec<String> = set.errors.iter().map(|e| e.to_string()).collect();
    if set.outputs.iter().all(|o| o.observed().is_all_unknown()) && !errors.is_empty() {
        if set.errors.iter().all(|e| matches!(e, ExtractionError::Gateway { .. })) {
            return Err(PipelineError::Gateway { patient_id: pid.clone(), message: errors.join("; ") });
        }
        return Err(stage_err(pid, Stage::Extraction, errors.join("; ")));
    }
    let profile = consensus::integrate(pid, &set.outputs, cfg.integration, Some(gateway))
        .map_err(|e| stage_err(pid, Stage::Integration, e))?;
    Ok((profile, errors))
}

/// Matched factors plus BM25 passages for each factor query.
pub fn gather_evidence(profile: &UnifiedProfile, cfg: &RunConfig, index: &EvidenceIndex, factors: &FactorTable) -> TrialEvidence {
    if cfg.ablation.disable_evidence {
        return TrialEvidence::default();
    }
    let passages = factors
        .build_queries(profile)
        .into_iter()
        .flat_map(|q| {
            index
                .retrieve(&q, cfg.top_n)
                .into_iter()
                .map(move |chunk| Passage { query: q.clone(), chunk })
                .collect::<Vec<_>>()
        })
        .collect();
    TrialEvidence { factors: factors.matches(profile), passages }
}

fn empty_retrieval() -> RetrievalResult {
    RetrievalResult { cases: Vec::new(), matched_patterns: Vec::new(), p_case: BTreeMap::new() }
}

/// Predictions for one patient. The memory is read-only here.
pub fn predict_patient(record: &PatientRecord, cfg: &RunConfig, stores: Stores<'_>) -> Result<PatientResult, PipelineError> {
    let (profile, extraction_errors) = build_profile(record, cfg, stores.gateway)?;
    let (retrieval, memory) = if cfg.ablation.disable_sea_mem {
        (empty_retrieval(), None)
    } else {
        (stores.memory.retrieve_similar(&profile, cfg.k), Some(stores.memory))
    };
    let trial = gather_evidence(&profile, cfg, stores.index, stores.factors);
    let priors = |t: Target| memory.and_then(|m| m.base_rate(t));

    let (predictions, fallback) = match cfg.reasoning {
        PredictionMode::Deterministic => {
            (reasoning::deterministic_predictions(&profile, &retrieval, &trial, priors, &cfg.reason), None)
        }
        PredictionMode::Model => {
            let run = reasoning::model_predict(&profile, &retrieval, &trial, priors, &cfg.reason, stores.gateway);
            (run.predictions, run.fallback.map(|e| e.to_string()))
        }
    };
    let supplied = supplied_refs(&profile, &retrieval, &trial);
    let unresolved = predictions.iter().flat_map(|p| validate_citations(p, &supplied).unresolved).collect();
    Ok(PatientResult {
        patient_id: record.patient_id.clone(),
        profile,
        predictions,
        unresolved,
        extraction_errors,
        fallback,
    })
}

/// Maps jobs to results, keeping input order.
pub trait Runner {
    fn run<'a>(
        &self,
        jobs: &'a [PatientRecord],
        f: &(dyn Fn(&'a PatientRecord) -> Result<PatientResult, PipelineError> + Sync),
    ) -> Vec<Result<PatientResult, PipelineError>>;
}

pub struct Sequential;

impl Runner for Sequential {
    fn run<'a>(
        &self,
        jobs: &'a [PatientRecord],
        f: &(dyn Fn(&'a PatientRecord) -> Result<PatientResult, PipelineError> + Sync),
    ) -> Vec<Result<PatientResult, PipelineError>> {
        jobs.iter().map(f).collect()
    }
}

// ---------------------------------------------------------------------------
// memory bootstrap

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledCase {
    pub record: PatientRecord,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier: Option<Tier>,
}

#[derive(Debug)]
pub struct Bootstrap {
    pub store: MemoryStore,
    pub failures: Vec<String>,
    pub warnings: Vec<String>,
}

/// A compacted, mined memory built from labelled cases.
pub fn bootstrap_memory(split: &[LabeledCase], cfg: &RunConfig, gateway: &Gateway) -> Bootstrap {
    let mut store = MemoryStore::new();
    let mut failures = Vec::new();
    let mut warnings = Vec::new();
    if split.is_empty() {
        warnings.push("empty bootstrap split; memory stays empty".to_string());
    }
    let full = cfg.with_ablation(Ablation::default());
    for case in split {
        let added = build_profile(&case.record, &full, gateway)
            .and_then(|(profile, _)| store.add_case(profile, case.outcome).map_err(PipelineError::from));
        if let Err(e) = added {
            failures.push(e.to_string());
        }
    }
    store.mine(cfg.min_support);
    store.compact();
    Bootstrap { store, failures, warnings }
}

/// Fold index of a patient, from a hash of its id.
pub fn fold_of(patient_id: &str, folds: usize) -> usize {
    let hex = sha256_hex(patient_id.as_bytes());
    let head = u64::from_str_radix(&hex[..16], 16).unwrap_or(0);
    (head % folds.max(1) as u64) as usize
}

pub fn split_folds(cases: &[LabeledCase], folds: usize) -> Vec<Vec<usize>> {
    let mut out = alloc::vec![Vec::new(); folds.max(1)];
    for (i, c) in cases.iter().enumerate() {
        out[fold_of(&c.record.patient_id, folds)].push(i);
    }
    out
}

/// One bootstrapped memory per fold, each from the cases outside it.
pub fn fold_memories(cases: &[LabeledCase], cfg: &RunConfig, gateway: &Gateway) -> Vec<Bootstrap> {
    let folds = split_folds(cases, cfg.folds);
    (0..folds.len())
        .map(|k| {
            let train: Vec<LabeledCase> = folds
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != k)
                .flat_map(|(_, idx)| idx.iter().map(|i| cases[*i].clone()))
                .collect();
            bootstrap_memory(&train, cfg, gateway)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitationTally {
    pub profile: usize,
    pub case: usize,
    pub trial: usize,
    pub unresolved: usize,
}

impl CitationTally {
    pub fn of(&self, kind: CitationKind) -> usize {
        match kind {
            CitationKind::Profile => self.profile,
            CitationKind::Case => self.case,
            CitationKind::Trial => self.trial,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub ablation: Ablation,
    pub metrics: Metrics,
    pub citations: CitationTally,
    pub gateway_calls: u64,
    pub failures: Vec<String>,
    /// Failures caused by the gateway, a subset of `failures`.
    pub gateway_failures: usize,
    pub results: Vec<PatientResult>,
}

impl RunReport {
    pub fn predictions(&self) -> impl Iterator<Item = &Prediction> {
        self.results.iter().flat_map(|r| r.predictions.iter())
    }
}

/// Cross-validated run over prebuilt fold memories.
pub fn evaluate_folds(
    cases: &[LabeledCase],
    memories: &[Bootstrap],
    cfg: &RunConfig,
    index: &EvidenceIndex,
    factors: &FactorTable,
    gateway: &Gateway,
    runner: &dyn Runner,
) -> Result<RunReport, PipelineError> {
    let calls_before = gateway.calls_made();
    let folds = split_folds(cases, memories.len());
    let mut slots: Vec<Option<Result<PatientResult, PipelineError>>> = alloc::vec![None; cases.len()];
    for (k, idx) in folds.iter().enumerate() {
        let memory = &memories[k].store;
        let eval_ids: BTreeSet<&str> = idx.iter().map(|i| cases[*i].record.patient_id.as_str()).collect();
        let leaked: Vec<String> =
            memory.entries().iter().map(|e| e.patient_id()).filter(|p| eval_ids.contains(p)).map(String::from).collect();
        if !leaked.is_empty() {
            return Err(PipelineError::Leakage(leaked));
        }
        let records: Vec<PatientRecord> = idx.iter().map(|i| cases[*i].record.clone()).collect();
        let stores = Stores { memory, index, factors, gateway };
        let results = runner.run(&records, &|r| predict_patient(r, cfg, stores));
        for (i, res) in idx.iter().zip(results) {
            slots[*i] = Some(res);
        }
    }

    let mut results = Vec::new();
    let mut failures = Vec::new();
    let mut gateway_failures = 0;
    let mut labels = BTreeMap::new();
    let mut tiers = BTreeMap::new();
    for (case, slot) in cases.iter().zip(slots) {
        match slot.expect("every case belongs to a fold") {
            Ok(r) => {
                labels.insert(case.record.patient_id.clone(), case.outcome);
                if let Some(t) = case.tier {
                    tiers.insert(case.record.patient_id.clone(), t);
                }
                results.push(r);
            }
            Err(e) => {
                gateway_failures += usize::from(matches!(e, PipelineError::Gateway { .. }));
                failures.push(e.to_string());
            }
        }
    }
    let predictions: Vec<Prediction> = results.iter().flat_map(|r| r.predictions.iter().cloned()).collect();
    let metrics = metrics::evaluate(&predictions, &labels, (!tiers.is_empty()).then_some(&tiers))?;
    let mut citations = CitationTally::default();
    for p in &predictions {
        citations.profile += p.cites(CitationKind::Profile);
        citations.case += p.cites(CitationKind::Case);
        citations.trial += p.cites(CitationKind::Trial);
    }
    citations.unresolved = results.iter().map(|r| r.unresolved.len()).sum();
    Ok(RunReport {
        config_hash: cfg.hash(),
        ablation: cfg.ablation,
        metrics,
        citations,
        gateway_calls: gateway.calls_made() - calls_before,
        failures,
        gateway_failures,
        results,
    })
}

/// Bootstraps fold memories, then evaluates.
pub fn evaluate_cohort(
    cases: &[LabeledCase],
    cfg: &RunConfig,
    index: &EvidenceIndex,
    factors: &FactorTable,
    gateway: &Gateway,
    runner: &dyn Runner,
) -> Result<RunReport, PipelineError> {
    let memories = fold_memories(cases, cfg, gateway);
    evaluate_folds(cases, &memories, cfg, index, factors, gateway, runner)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub report: RunReport,
}

pub fn ablation_rows() -> [(&'static str, Ablation); 5] {
    let a = |m, s, e| Ablation { disable_multi_expert: m, disable_sea_mem: s, disable_evidence: e };
    [
        ("full", a(false, false, false)),
        ("w/o multi-expert", a(true, false, false)),
        ("w/o sea-mem", a(false, true, false)),
        ("w/o evidence", a(false, false, true)),
        ("single extractor", a(true, true, true)),
    ]
}

/// The five comparison runs, sharing fold memories.
pub fn run_ablation(
    cases: &[LabeledCase],
    base: &RunConfig,
    index: &EvidenceIndex,
    factors: &FactorTable,
    gateway: &Gateway,
    runner: &dyn Runner,
) -> Result<Vec<AblationRow>, PipelineError> {
    let memories = fold_memories(cases, base, gateway);
    ablation_rows()
        .into_iter()
        .map(|(name, ablation)| {
            let cfg = base.with_ablation(ablation);
            let report = evaluate_folds(cases, &memories, &cfg, index, factors, gateway, runner)?;
            Ok(AblationRow { name: name.to_string(), report })
        })
        .collect()
}

/// Plain-text table of the ablation rows.
pub fn render_ablation(rows: &[AblationRow]) -> String {
    let mut out = String::from("row                 psa_acc  os_acc   overall  overall_f1\n");
    for r in rows {
        let m = &r.report.metrics;
        out.push_str(&format!(
            "{:<19} {:>7.1}  {:>7.1}  {:>7.1}  {:>7.1}\n",
            r.name,
            m.per_target[&Target::PsaResponse].accuracy * 100.0,
            m.per_target[&Target::OsGt12m].accuracy * 100.0,
            m.overall.accuracy * 100.0,
            m.overall.f1 * 100.0
        ));
    }
    out
}

/// Plain-text rendering of one run.
pub fn render_report(report: &RunReport) -> String {
    let m = &report.metrics;
    let mut out = format!("config {}\npatients {}\n", report.config_hash, m.patients);
    for (t, s) in &m.per_target {
        out.push_str(&format!("{:<13} acc {:>5.1}  f1 {:>5.1}\n", t.as_str(), s.accuracy * 100.0, s.f1 * 100.0));
    }
    out.push_str(&format!("{:<13} acc {:>5.1}  f1 {:>5.1}\n", "overall", m.overall.accuracy * 100.0, m.overall.f1 * 100.0));
    for row in &m.tiers {
        out.push_str(&format!("tier {:<10} n {:>4}  acc {:>5.1}\n", row.tier.as_str(), row.support, row.accuracy * 100.0));
    }
    if let Some(w) = m.tier_overall {
        out.push_str(&format!("tier overall      acc {:>5.1}\n", w * 100.0));
    }
    out.push_str(&format!(
        "citations profile {} case {} trial {} unresolved {}\ngateway calls {}\nfailures {}\n",
        report.citations.profile,
        report.citations.case,
        report.citations.trial,
        report.citations.unresolved,
        report.gateway_calls,
        report.failures.len()
    ));
    out
}
