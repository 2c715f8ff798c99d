//! The stand-in knowledge base shipped with the binary.

use theraloop_core::evidence::EvidenceIndex;

use crate::files::{ingest_texts, DataError, IndexFile};

/// (doc id, file text) for every corpus file, sorted by id.
pub const SHIPPED_CORPUS: [(&str, &str); 23] = [
    ("01_psma_uptake_response", include_str!("../corpus/01_psma_uptake_response.txt")),
    ("02_liver_metastasis_survival", include_str!("../corpus/02_liver_metastasis_survival.txt")),
    ("03_visceral_absence", include_str!("../corpus/03_visceral_absence.txt")),
    ("04_liver_absence", include_str!("../corpus/04_liver_absence.txt")),
    ("05_baseline_psa", include_str!("../corpus/05_baseline_psa.txt")),
    ("06_tumor_burden", include_str!("../corpus/06_tumor_burden.txt")),
    ("07_alkaline_phosphatase", include_str!("../corpus/07_alkaline_phosphatase.txt")),
    ("08_ecog_status", include_str!("../corpus/08_ecog_status.txt")),
    ("09_ldh", include_str!("../corpus/09_ldh.txt")),
    ("10_hemoglobin", include_str!("../corpus/10_hemoglobin.txt")),
    ("11_renal_function", include_str!("../corpus/11_renal_function.txt")),
    ("12_prior_chemotherapy", include_str!("../corpus/12_prior_chemotherapy.txt")),
    ("13_randomised_design", include_str!("../corpus/13_randomised_design.txt")),
    ("14_phase3_design", include_str!("../corpus/14_phase3_design.txt")),
    ("15_suvmax", include_str!("../corpus/15_suvmax.txt")),
    ("16_bone_disease", include_str!("../corpus/16_bone_disease.txt")),
    ("17_nodal_disease", include_str!("../corpus/17_nodal_disease.txt")),
    ("18_lung_metastases", include_str!("../corpus/18_lung_metastases.txt")),
    ("19_psa_kinetics", include_str!("../corpus/19_psa_kinetics.txt")),
    ("20_toxicity", include_str!("../corpus/20_toxicity.txt")),
    ("21_retreatment", include_str!("../corpus/21_retreatment.txt")),
    ("22_pet_reading", include_str!("../corpus/22_pet_reading.txt")),
    ("23_quality_of_life", include_str!("../corpus/23_quality_of_life.txt")),
];

pub fn shipped_index() -> (EvidenceIndex, IndexFile) {
    ingest_texts(SHIPPED_CORPUS.iter().map(|(id, t)| (id.to_string(), *t))).expect("shipped corpus ingests")
}

/// The index at `path`, or the shipped one.
pub fn load_or_shipped(path: Option<&std::path::Path>) -> Result<EvidenceIndex, DataError> {
    match path {
        Some(p) => crate::files::load_index(p),
        None => Ok(shipped_index().0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use theraloop_core::domain::{Features, TriState, UnifiedProfile};
    use theraloop_core::evidence::FactorTable;

    #[test]
    fn corpus_has_23_docs_and_all_sources() {
        let (index, file) = shipped_index();
        assert_eq!(index.docs().len(), 23);
        assert!(file.report.skipped.is_empty());
        let sources: BTreeSet<&str> = index.docs().iter().map(|d| d.source_tag.as_str()).collect();
        for f in &FactorTable::shipped().factors {
            assert!(sources.contains(f.citation.source_tag.as_str()), "{}", f.citation.source_tag);
        }
    }

    #[test]
    fn liver_query_finds_hazard_statement() {
        let (index, _) = shipped_index();
        let top = index.retrieve("liver metastasis prognosis", 3);
        assert!(top[0].text.contains("liver metastasis HR=2.1"), "{:?}", top[0]);
        assert!(index.retrieve("zzzz qqqq", 3).is_empty());
    }

    #[test]
    fn every_factor_query_retrieves_something() {
        let (index, _) = shipped_index();
        let mut f = Features::default();
        f.radiology.liver_met = TriState::Yes;
        f.radiology.visceral_met = TriState::Yes;
        let p = UnifiedProfile::with_uniform_provenance("x", f, 1.0);
        for f in &FactorTable::shipped().factors {
            assert!(!index.retrieve(&f.query, 3).is_empty(), "{}", f.query);
        }
        assert!(!FactorTable::shipped().build_queries(&p).is_empty());
    }
}
