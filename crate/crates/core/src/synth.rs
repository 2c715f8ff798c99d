//! Seeded synthetic cohorts with retained latent truth.
//!
//! Every patient shares one severity latent `a ~ N(0, latent_sd)` that
//! shifts all feature distributions, so prognostic features co-vary the
//! way they do clinically. Outcomes use the same factor-logit form as the
//! deterministic scorer with the case term switched off. Documents are
//! rendered in the template grammar, with narrative cue sentences on
//! lines that carry no facts.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consensus::{self, IntegrationMode};
use crate::domain::{
    encode, ClinicalFeatures, Features, Field, LabFeatures, Outcome, PatientRecord, PsaTrend, PsmaExpression,
    RadiologyFeatures, Target, TriState, TumorBurden, UnifiedProfile,
};
use crate::evidence::FactorTable;
use crate::extraction::{self, ExtractionConfig};
use crate::gateway::{Gateway, GatewayConfig, StubBackend};
use crate::grammar::{self, DocKind};
use crate::math::sigmoid;
use crate::reasoning::effect_term;
use crate::{schemas, units};

pub const SYNTH_V1: &str = include_str!("../data/synth.v1.json");
pub const CUE_LEXICON_VERSION: &str = "cues.v1";
pub const ALARMING_CUES: [&str; 3] = ["innumerable lesions", "extensive", "progression despite"];
pub const REASSURING_CUES: [&str; 3] = ["stable", "limited", "solitary"];
/// Probabilities inside this band make a case too uncertain to be Clear.
pub const AMBIGUOUS_BAND: (f64, f64) = (0.25, 0.75);
pub const DEFAULT_N: usize = 400;
pub const CALIBRATION_SAMPLES: usize = 100_000;
const CALIBRATION_TOLERANCE: f64 = 0.005;
/// Candidates drawn per requested case before a tier counts as starved.
const MAX_DRAWS_PER_CASE: usize = 500;

// ---------------------------------------------------------------------------
// parameter table

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Logistic {
    pub intercept: f64,
    pub slope: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: f64,
    pub slope: f64,
    pub sd: f64,
}

/// `clamp(round(center + slope·a + noise·z))` over the category range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ordinal {
    pub center: f64,
    pub slope: f64,
    pub noise: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerPsma<T> {
    pub high: T,
    pub moderate: T,
    pub low: T,
    pub heterogeneous: T,
}

impl<T: Copy> PerPsma<T> {
    fn in_order(&self) -> [(PsmaExpression, T); 4] {
        [
            (PsmaExpression::High, self.high),
            (PsmaExpression::Moderate, self.moderate),
            (PsmaExpression::Low, self.low),
            (PsmaExpression::Heterogeneous, self.heterogeneous),
        ]
    }

    fn of(&self, p: PsmaExpression) -> T {
        match p {
            PsmaExpression::High => self.high,
            PsmaExpression::Moderate => self.moderate,
            PsmaExpression::Low => self.low,
            _ => self.heterogeneous,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendRates {
    pub rising: f64,
    pub stable: f64,
    pub falling: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comorbidity {
    pub term: String,
    pub rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerTarget {
    pub psa_response: f64,
    pub os_gt_12m: f64,
}

impl PerTarget {
    pub fn get(&self, t: Target) -> f64 {
        match t {
            Target::PsaResponse => self.psa_response,
            Target::OsGt12m => self.os_gt_12m,
        }
    }

    fn set(&mut self, t: Target, v: f64) {
        match t {
            Target::PsaResponse => self.psa_response = v,
            Target::OsGt12m => self.os_gt_12m = v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeParams {
    /// Reference rate that response-rate factors are measured against.
    pub reference_psa_response_rate: f64,
    /// Effect of one direction-only factor, in logits.
    pub delta: f64,
    pub intercepts: PerTarget,
    /// Cohort positive fractions the intercepts are calibrated to.
    pub targets: PerTarget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub version: String,
    pub latent_sd: f64,
    pub psma_expression: PerPsma<Logistic>,
    pub suv_max_log: PerPsma<Gaussian>,
    pub bone_met_rate: f64,
    pub lymph_met: Logistic,
    pub liver_met: Logistic,
    pub lung_met: Logistic,
    pub other_visceral_rate: f64,
    pub tumor_burden: Ordinal,
    pub psa_log: Gaussian,
    pub psa_trend: TrendRates,
    pub hemoglobin: Gaussian,
    pub alp_log: Gaussian,
    pub ldh_log: Gaussian,
    pub egfr: Gaussian,
    pub prior_adt_rate: f64,
    pub prior_chemo: Logistic,
    pub second_chemo_line_rate: f64,
    pub ecog: Ordinal,
    pub comorbidities: Vec<Comorbidity>,
    pub outcome: OutcomeParams,
    pub cue_counts: Vec<u8>,
    /// Provenance of every row: `quoted: ...` or `repo-assumed...`.
    pub basis: BTreeMap<String, String>,
}

impl SynthParams {
    pub fn shipped() -> SynthParams {
        serde_json::from_str(SYNTH_V1).expect("shipped synth parameters parse")
    }

    /// Hex SHA-256 of the canonical encoding.
    pub fn sha256(&self) -> String {
        sha256_hex(encode(self).expect("parameters encode").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// tiers and mix

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Clear,
    Ambiguous,
    Misleading,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Clear, Tier::Ambiguous, Tier::Misleading];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Clear => "clear",
            Tier::Ambiguous => "ambiguous",
            Tier::Misleading => "misleading",
        }
    }

    pub fn parse(s: &str) -> Option<Tier> {
        Tier::ALL.into_iter().find(|t| t.as_str() == s)
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierMix {
    pub clear: f64,
    pub ambiguous: f64,
    pub misleading: f64,
}

impl Default for TierMix {
    fn default() -> Self {
        TierMix { clear: 0.5, ambiguous: 0.3, misleading: 0.2 }
    }
}

impl TierMix {
    fn weights(&self) -> [f64; 3] {
        [self.clear, self.ambiguous, self.misleading]
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let w = self.weights();
        if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || libm::fabs(w.iter().sum::<f64>() - 1.0) > 1e-9 {
            return Err(SynthError::InvalidMix(format!("{w:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }

    /// Exact per-tier counts for `n` cases: floors first, then the
    /// remainder to the largest fractional parts.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let w = self.weights();
        let raw: Vec<f64> = w.iter().map(|x| x * n as f64).collect();
        let mut counts = [0usize; 3];
        for i in 0..3 {
            counts[i] = libm::floor(raw[i] + 1e-9) as usize;
        }
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let fa = raw[a] - counts[a] as f64;
            let fb = raw[b] - counts[b] as f64;
            fb.partial_cmp(&fa).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        let mut left = n - counts.iter().sum::<usize>();
        for i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            counts[*i] += 1;
            left -= 1;
        }
        counts
    }
}

/// The tier rule. The outcome direction is survival past 12 months; the
/// surface direction is reassuring when the score is negative.
pub fn classify_tier(probability: &BTreeMap<Target, f64>, outcome: &Outcome, surface_score: i32) -> Tier {
    let outcome_dir = if outcome.os_gt_12m { 1 } else { -1 };
    let surface_dir = -surface_score.signum();
    if surface_dir != 0 && surface_dir != outcome_dir {
        return Tier::Misleading;
    }
    let decisive = probability.values().all(|p| *p <= AMBIGUOUS_BAND.0 || *p >= AMBIGUOUS_BAND.1);
    if surface_dir != 0 && decisive {
        Tier::Clear
    } else {
        Tier::Ambiguous
    }
}

// ---------------------------------------------------------------------------
// latent patients

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentPatient {
    pub patient_id: String,
    pub true_profile: UnifiedProfile,
    pub outcome: Outcome,
    pub tier: Tier,
    /// Alarming cue count minus reassuring cue count.
    pub surface_score: i32,
    pub model_probability: BTreeMap<Target, f64>,
    pub alarming_cues: Vec<String>,
    pub reassuring_cues: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCase {
    pub latent: LatentPatient,
    pub record: PatientRecord,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("invalid tier mix: {0}")]
    InvalidMix(String),
    #[error("calibration failure for {target}: reached {achieved:.4}, wanted {wanted:.4}")]
    CalibrationFailure { target: Target, achieved: f64, wanted: f64 },
    #[error("tier {tier:?} still short of its count after {drawn} candidates")]
    TierStarved { tier: Tier, drawn: usize },
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

fn chance<R: Rng>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

fn round1(v: f64) -> f64 {
    libm::round(v * 10.0) / 10.0
}

fn ordinal(o: &Ordinal, a: f64, z: f64, max: i64) -> i64 {
    (libm::round(o.center + o.slope * a + o.noise * z) as i64).clamp(0, max)
}

fn tri(b: bool) -> TriState {
    TriState::from_bool(b)
}

/// Draws carried by one candidate besides its features, so calibration
/// and generation consume the stream identically.
#[derive(Clone, Debug)]
struct Draw {
    features: Features,
    uniforms: [f64; 2],
    alarming: u8,
    reassuring: u8,
}

pub struct Generator {
    pub params: SynthParams,
    table: FactorTable,
}

impl Default for Generator {
    fn default() -> Self {
        Generator::new(SynthParams::shipped())
    }
}

impl Generator {
    pub fn new(params: SynthParams) -> Self {
        Generator { params, table: FactorTable::shipped() }
    }

    /// Samples a fully known feature set.
    pub fn sample_features<R: Rng>(&self, rng: &mut R) -> Features {
        let p = &self.params;
        let a = normal(rng) * p.latent_sd;

        let weights: Vec<(PsmaExpression, f64)> = p
            .psma_expression
            .in_order()
            .iter()
            .map(|(k, l)| (*k, libm::exp(l.intercept + l.slope * a)))
            .collect();
        let total: f64 = weights.iter().map(|w| w.1).sum();
        let mut u = rng.random::<f64>() * total;
        let mut psma = PsmaExpression::Heterogeneous;
        for (k, w) in &weights {
            if u < *w {
                psma = *k;
                break;
            }
            u -= w;
        }
        let suv = p.suv_max_log.of(psma);
        let suv_max = round1(libm::exp(suv.mean + suv.slope * a + suv.sd * normal(rng)).clamp(1.0, 99.0));

        let logistic = |l: &Logistic, rng: &mut R| chance(rng, sigmoid(l.intercept + l.slope * a));
        let bone = chance(rng, p.bone_met_rate);
        let lymph = logistic(&p.lymph_met, rng);
        let liver = logistic(&p.liver_met, rng);
        let lung = logistic(&p.lung_met, rng);
        let other = chance(rng, p.other_visceral_rate);
        let burden = TumorBurden::KNOWN[ordinal(&p.tumor_burden, a, normal(rng), 2) as usize];

        let lognormal = |g: &Gaussian, rng: &mut R| libm::exp(g.mean + g.slope * a + g.sd * normal(rng));
        let psa = round1(lognormal(&p.psa_log, rng).clamp(0.1, 9_999.0));
        let t = rng.random::<f64>() * (p.psa_trend.rising + p.psa_trend.stable + p.psa_trend.falling);
        let psa_trend = if t < p.psa_trend.rising {
            PsaTrend::Rising
        } else if t < p.psa_trend.rising + p.psa_trend.stable {
            PsaTrend::Stable
        } else {
            PsaTrend::Falling
        };
        let hb = &p.hemoglobin;
        let hemoglobin = round1((hb.mean + hb.slope * a + hb.sd * normal(rng)).clamp(5.0, 18.0));
        let alp = round1(lognormal(&p.alp_log, rng).clamp(20.0, 4_999.0));
        let ldh = round1(lognormal(&p.ldh_log, rng).clamp(80.0, 9_999.0));
        let eg = &p.egfr;
        let egfr = round1((eg.mean + eg.slope * a + eg.sd * normal(rng)).clamp(10.0, 150.0));

        let adt = chance(rng, p.prior_adt_rate);
        let chemo = logistic(&p.prior_chemo, rng);
        let lines = if chemo { 1 + u32::from(chance(rng, p.second_chemo_line_rate)) } else { 0 };
        let ecog = ordinal(&p.ecog, a, normal(rng), 3) as u8;
        let comorbidities: Vec<String> =
            p.comorbidities.iter().filter(|c| chance(rng, c.rate)).map(|c| c.term.clone()).collect();

        Features {
            radiology: RadiologyFeatures {
                psma_expression: psma,
                bone_met: tri(bone),
                lymph_met: tri(lymph),
                visceral_met: tri(liver || lung || other),
                liver_met: tri(liver),
                lung_met: tri(lung),
                tumor_burden: burden,
                suv_max: Some(suv_max),
            },
            labs: LabFeatures {
                psa: Some(psa),
                psa_trend,
                hemoglobin: Some(hemoglobin),
                alp: Some(alp),
                ldh: Some(ldh),
                egfr: Some(egfr),
            },
            clinical: ClinicalFeatures {
                prior_adt: tri(adt),
                prior_chemo: tri(chemo),
                chemo_lines: Some(lines),
                ecog: Some(ecog),
                comorbidities: Some(comorbidities),
            },
        }
    }

    pub fn sample_profile<R: Rng>(&self, rng: &mut R, patient_id: &str) -> UnifiedProfile {
        UnifiedProfile::with_uniform_provenance(patient_id, self.sample_features(rng), 1.0)
    }

    /// Sum of factor effects for `target`, without the intercept.
    pub fn effects(&self, profile: &UnifiedProfile, target: Target) -> f64 {
        let o = &self.params.outcome;
        self.table
            .matches(profile)
            .iter()
            .filter_map(|m| effect_term(&m.factor, target, o.reference_psa_response_rate, o.delta))
            .sum()
    }

    fn probability_with(&self, intercepts: &PerTarget, effects: f64, target: Target) -> f64 {
        sigmoid(intercepts.get(target) + effects)
    }

    pub fn probabilities(&self, profile: &UnifiedProfile) -> BTreeMap<Target, f64> {
        Target::ALL
            .into_iter()
            .map(|t| (t, self.probability_with(&self.params.outcome.intercepts, self.effects(profile, t), t)))
            .collect()
    }

    fn cue_count<R: Rng>(&self, rng: &mut R) -> u8 {
        let c = &self.params.cue_counts;
        c[rng.random_range(0..c.len())]
    }

    fn draw<R: Rng>(&self, rng: &mut R) -> Draw {
        let features = self.sample_features(rng);
        let uniforms = [rng.random::<f64>(), rng.random::<f64>()];
        let alarming = self.cue_count(rng);
        let reassuring = self.cue_count(rng);
        Draw { features, uniforms, alarming, reassuring }
    }

    /// Outcome, probabilities and tier of one candidate under `intercepts`.
    fn resolve(&self, effects: [f64; 2], d: &Draw, intercepts: &PerTarget) -> (Outcome, BTreeMap<Target, f64>, Tier) {
        let p: BTreeMap<Target, f64> = Target::ALL
            .into_iter()
            .enumerate()
            .map(|(i, t)| (t, self.probability_with(intercepts, effects[i], t)))
            .collect();
        let outcome = Outcome {
            psa_response: d.uniforms[0] < p[&Target::PsaResponse],
            os_gt_12m: d.uniforms[1] < p[&Target::OsGt12m],
        };
        let tier = classify_tier(&p, &outcome, i32::from(d.alarming) - i32::from(d.reassuring));
        (outcome, p, tier)
    }

    fn draw_effects(&self, d: &Draw) -> [f64; 2] {
        let profile = UnifiedProfile::with_uniform_provenance("calibration", d.features.clone(), 1.0);
        [self.effects(&profile, Target::PsaResponse), self.effects(&profile, Target::OsGt12m)]
    }

    /// Intercepts that put the tier-assembled cohort marginals on target,
    /// by coordinate bisection against Monte Carlo draws with common
    /// random numbers.
    pub fn calibrate(&self, mix: &TierMix, samples: usize, seed: u64) -> Result<PerTarget, SynthError> {
        mix.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws: Vec<(Draw, [f64; 2])> = (0..samples)
            .map(|_| {
                let d = self.draw(&mut rng);
                let e = self.draw_effects(&d);
                (d, e)
            })
            .collect();
        let weights = mix.weights();
        let marginal = |c: &PerTarget, target: Target| {
            let mut pos = [0usize; 3];
            let mut n = [0usize; 3];
            for (d, e) in &draws {
                let (o, _, tier) = self.resolve(*e, d, c);
                n[tier.index()] += 1;
                pos[tier.index()] += usize::from(o.get(target));
            }
            (0..3).filter(|&k| n[k] > 0).map(|k| weights[k] * pos[k] as f64 / n[k] as f64).sum::<f64>()
        };
        let targets = self.params.outcome.targets;
        let mut c = self.params.outcome.intercepts;
        for _sweep in 0..4 {
            for t in Target::ALL {
                let (mut lo, mut hi) = (-8.0, 8.0);
                for _ in 0..30 {
                    let mid = 0.5 * (lo + hi);
                    c.set(t, mid);
                    if marginal(&c, t) < targets.get(t) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                c.set(t, 0.5 * (lo + hi));
            }
        }
        for t in Target::ALL {
            let achieved = marginal(&c, t);
            if libm::fabs(achieved - targets.get(t)) > CALIBRATION_TOLERANCE {
                return Err(SynthError::CalibrationFailure { target: t, achieved, wanted: targets.get(t) });
            }
        }
        Ok(c)
    }

    fn latent_from(&self, d: Draw, patient_id: &str) -> LatentPatient {
        let profile = UnifiedProfile::with_uniform_provenance(patient_id, d.features.clone(), 1.0);
        let effects = self.draw_effects(&d);
        let (outcome, model_probability, tier) = self.resolve(effects, &d, &self.params.outcome.intercepts);
        LatentPatient {
            patient_id: patient_id.to_string(),
            true_profile: profile,
            outcome,
            tier,
            surface_score: i32::from(d.alarming) - i32::from(d.reassuring),
            model_probability,
            alarming_cues: ALARMING_CUES[..usize::from(d.alarming)].iter().map(|s| s.to_string()).collect(),
            reassuring_cues: REASSURING_CUES[..usize::from(d.reassuring)].iter().map(|s| s.to_string()).collect(),
        }
    }

    /// One latent patient straight from the stream, whatever its tier.
    pub fn draw_latent<R: Rng>(&self, rng: &mut R, patient_id: &str) -> LatentPatient {
        let d = self.draw(rng);
        self.latent_from(d, patient_id)
    }

    /// A cohort of `n` cases with exact tier counts, rendered and verified.
    pub fn generate(&self, n: usize, mix: &TierMix, seed: u64) -> Result<Cohort, SynthError> {
        mix.validate()?;
        let mut need = mix.counts(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut latents = Vec::with_capacity(n);
        let mut drawn = 0usize;
        let limit = MAX_DRAWS_PER_CASE * n.max(1);
        while latents.len() < n {
            if drawn >= limit {
                let tier = Tier::ALL.into_iter().find(|t| need[t.index()] > 0).unwrap_or(Tier::Clear);
                return Err(SynthError::TierStarved { tier, drawn });
            }
            drawn += 1;
            let d = self.draw(&mut rng);
            let pid = format!("S{:04}", latents.len() + 1);
            let latent = self.latent_from(d, &pid);
            if need[latent.tier.index()] > 0 {
                need[latent.tier.index()] -= 1;
                latents.push(latent);
            }
        }
        let cases: Vec<SynthCase> = latents
            .into_iter()
            .map(|latent| {
                let record = render_documents(&latent, seed);
                SynthCase { latent, record }
            })
            .collect();
        let verification = verify(&cases);
        let manifest = Manifest::build(self, &cases, n, *mix, seed, drawn, verification);
        Ok(Cohort { cases, manifest })
    }
}

// ---------------------------------------------------------------------------
// documents

fn doc_rng(seed: u64, patient_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(patient_id.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

fn slot_line<R: Rng>(rng: &mut R, kind: DocKind, field: Field, features: &Features) -> Option<String> {
    let value = features.get(field)?;
    let variants = grammar::variants(kind, field);
    let slot = variants[rng.random_range(0..variants.len())];
    let alt = matches!(field, Field::Hemoglobin | Field::Alp | Field::Ldh) && chance(rng, 0.3);
    Some(format!("{}{}{}", slot.prefix, grammar::render_value(field, &value, alt), slot.suffix))
}

/// Narrative sentence carrying one cue phrase, and the document it goes in.
fn cue_sentence(cue: &str) -> (DocKind, &'static str) {
    match cue {
        "innumerable lesions" => (DocKind::Pet, "Reader comment: innumerable lesions give the skeleton a dramatic look on the projection images."),
        "extensive" => (DocKind::Pet, "Reader comment: extensive bone-lesion uptake is striking at first glance."),
        "progression despite" => (DocKind::Notes, "History as told by the family: progression despite several earlier treatments."),
        "stable" => (DocKind::Notes, "The patient describes feeling stable and keeps up daily walks."),
        "limited" => (DocKind::Pet, "Reader comment: tracer spread looks visually limited on the overview images."),
        _ => (DocKind::Notes, "A solitary painful rib site settled after local radiotherapy."),
    }
}

fn assemble(kind: DocKind, header: &[String], mut facts: Vec<String>, cues: Vec<&str>, footer: &str) -> String {
    let mut lines = alloc::vec![kind.sentinel()];
    lines.extend(header.iter().cloned());
    lines.append(&mut facts);
    lines.extend(cues.into_iter().map(String::from));
    lines.push(footer.to_string());
    let mut text = lines.join("\n");
    text.push('\n');
    text
}

/// Renders the three template documents. Same latent and seed give the
/// same bytes.
pub fn render_documents(latent: &LatentPatient, seed: u64) -> PatientRecord {
    let mut rng = doc_rng(seed, &latent.patient_id);
    let f = &latent.true_profile.features;
    let pid = &latent.patient_id;

    let cues_in = |kind: DocKind| -> Vec<&'static str> {
        latent
            .alarming_cues
            .iter()
            .chain(latent.reassuring_cues.iter())
            .map(|c| cue_sentence(c))
            .filter(|(k, _)| *k == kind)
            .map(|(_, s)| s)
            .collect()
    };
    let pet_cues = cues_in(DocKind::Pet);
    let note_cues = cues_in(DocKind::Notes);

    let mut pet_facts: Vec<String> =
        Field::RADIOLOGY.iter().filter_map(|fl| slot_line(&mut rng, DocKind::Pet, *fl, f)).collect();
    pet_facts.shuffle(&mut rng);
    let pet = assemble(
        DocKind::Pet,
        &[format!("PSMA PET/CT for {pid}, acquired before radioligand therapy."), "Findings:".to_string()],
        pet_facts,
        pet_cues,
        "End of report.",
    );

    let mut lab_facts: Vec<String> =
        Field::LABS.iter().filter_map(|fl| slot_line(&mut rng, DocKind::Labs, *fl, f)).collect();
    if chance(&mut rng, 0.5) {
        let creat = 0.7 + rng.random::<f64>();
        lab_facts.push(format!("Creatinine: {} mg/dL.", units::fmt1(creat)));
    }
    lab_facts.shuffle(&mut rng);
    let labs = assemble(
        DocKind::Labs,
        &[format!("Screening laboratory panel for {pid}.")],
        lab_facts,
        Vec::new(),
        "Panel complete.",
    );

    let mut note_facts: Vec<String> =
        Field::CLINICAL.iter().filter_map(|fl| slot_line(&mut rng, DocKind::Notes, *fl, f)).collect();
    if chance(&mut rng, 0.5) {
        if let Some(line) = slot_line(&mut rng, DocKind::Notes, Field::Psa, f) {
            note_facts.push(line);
        }
    }
    note_facts.shuffle(&mut rng);
    let notes = assemble(
        DocKind::Notes,
        &[format!("Oncology clinic note for {pid}."), "Seen to discuss radioligand therapy.".to_string()],
        note_facts,
        note_cues,
        "Plan: proceed with screening.",
    );

    PatientRecord {
        patient_id: pid.clone(),
        pet_report: pet,
        lab_report: labs,
        clinical_notes: notes,
        language_hint: Some("en".to_string()),
    }
}

/// Cue phrases found on narrative lines, as (alarming, reassuring) counts.
pub fn count_cues(record: &PatientRecord) -> (usize, usize) {
    let narrative: String = [&record.pet_report, &record.lab_report, &record.clinical_notes]
        .iter()
        .flat_map(|d| d.lines())
        .filter(|l| !grammar::is_slot_line(l) && !grammar::has_sentinel(l))
        .map(|l| l.to_lowercase())
        .collect::<Vec<_>>()
        .join("\n");
    let count = |lex: &[&str]| lex.iter().filter(|c| narrative.contains(*c)).count();
    (count(&ALARMING_CUES), count(&REASSURING_CUES))
}

// ---------------------------------------------------------------------------
// verification and manifest

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verification {
    pub cases: usize,
    pub cases_recovered: usize,
    pub fields_checked: usize,
    pub fields_recovered: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub mismatches: Vec<String>,
}

impl Verification {
    pub fn is_complete(&self) -> bool {
        self.cases_recovered == self.cases && self.fields_recovered == self.fields_checked
    }
}

/// Deterministic extraction and integration of every rendered case,
/// compared field by field with the latent truth.
pub fn verify(cases: &[SynthCase]) -> Verification {
    let gateway = Gateway::new(StubBackend::new(), schemas::registry(), GatewayConfig::default());
    let cfg = ExtractionConfig::default();
    let mut v = Verification::default();
    for case in cases {
        v.cases += 1;
        let set = extraction::extract_all(&case.record, &cfg, &gateway);
        let recovered = consensus::integrate(&case.record.patient_id, &set.outputs, IntegrationMode::Deterministic, None);
        let mut all = set.errors.is_empty();
        for field in Field::ALL {
            v.fields_checked += 1;
            let want = case.latent.true_profile.get(field);
            let got = recovered.as_ref().ok().and_then(|p| p.get(field));
            if want == got {
                v.fields_recovered += 1;
            } else {
                all = false;
                v.mismatches.push(format!("{}:{}", case.record.patient_id, field.name()));
            }
        }
        v.cases_recovered += usize::from(all);
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: String,
    pub cue_lexicon: String,
    pub seed: u64,
    pub n: usize,
    pub mix: TierMix,
    pub params_sha256: String,
    pub tier_counts: BTreeMap<Tier, usize>,
    pub positives: BTreeMap<Target, usize>,
    pub candidates_drawn: usize,
    pub documents_sha256: String,
    pub verification: Verification,
}

impl Manifest {
    fn build(g: &Generator, cases: &[SynthCase], n: usize, mix: TierMix, seed: u64, drawn: usize, verification: Verification) -> Manifest {
        let mut tier_counts: BTreeMap<Tier, usize> = Tier::ALL.into_iter().map(|t| (t, 0)).collect();
        let mut positives: BTreeMap<Target, usize> = Target::ALL.into_iter().map(|t| (t, 0)).collect();
        let mut docs = Sha256::new();
        for c in cases {
            *tier_counts.entry(c.latent.tier).or_default() += 1;
            for t in Target::ALL {
                *positives.entry(t).or_default() += usize::from(c.latent.outcome.get(t));
            }
            for d in [&c.record.pet_report, &c.record.lab_report, &c.record.clinical_notes] {
                docs.update(d.as_bytes());
                docs.update([0u8]);
            }
        }
        Manifest {
            generator: g.params.version.clone(),
            cue_lexicon: CUE_LEXICON_VERSION.to_string(),
            seed,
            n,
            mix,
            params_sha256: g.params.sha256(),
            tier_counts,
            positives,
            candidates_drawn: drawn,
            documents_sha256: docs.finalize().iter().map(|b| format!("{b:02x}")).collect(),
            verification,
        }
    }

    pub fn sha256(&self) -> String {
        sha256_hex(encode(self).expect("manifest encodes").as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub cases: Vec<SynthCase>,
    pub manifest: Manifest,
}

impl Cohort {
    pub fn records(&self) -> impl Iterator<Item = &PatientRecord> {
        self.cases.iter().map(|c| &c.record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::validate_profile;
    use crate::math::logit;

    fn small_cohort(seed: u64) -> Cohort {
        Generator::default().generate(40, &TierMix::default(), seed).unwrap()
    }

    #[test]
    fn every_parameter_row_has_a_basis() {
        let p = SynthParams::shipped();
        let value = serde_json::to_value(&p).unwrap();
        for key in value.as_object().unwrap().keys() {
            if key == "basis" || key == "version" {
                continue;
            }
            let basis = p.basis.get(key).unwrap_or_else(|| panic!("{key} has no basis"));
            assert!(basis.starts_with("quoted:") || basis.starts_with("repo-assumed"), "{key}: {basis}");
        }
    }

    #[test]
    fn same_seed_same_profiles() {
        let g = Generator::default();
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let pa = g.sample_profile(&mut a, "x");
            assert_eq!(pa, g.sample_profile(&mut b, "x"));
            assert!(validate_profile(&pa).is_ok(), "{:?}", validate_profile(&pa));
            assert_eq!(pa.features.known_fields().count(), Field::ALL.len());
        }
    }

    #[test]
    fn psma_rows_drive_response() {
        let g = Generator::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut hi, mut lo) = ((0usize, 0usize), (0usize, 0usize));
        for _ in 0..10_000 {
            let mut p = g.sample_profile(&mut rng, "x");
            let e_hi = {
                p.features.radiology.psma_expression = PsmaExpression::High;
                g.effects(&p, Target::PsaResponse)
            };
            let e_lo = {
                p.features.radiology.psma_expression = PsmaExpression::Low;
                g.effects(&p, Target::PsaResponse)
            };
            // the two rows differ by exactly their quoted rates on the logit scale
            assert!(libm::fabs((e_hi - e_lo) - (logit(0.66) - logit(0.37))) < 1e-9);
            let l = g.draw_latent(&mut rng, "y");
            let y = usize::from(l.outcome.psa_response);
            match l.true_profile.features.radiology.psma_expression {
                PsmaExpression::High => hi = (hi.0 + y, hi.1 + 1),
                PsmaExpression::Low => lo = (lo.0 + y, lo.1 + 1),
                _ => {}
            }
        }
        assert!(hi.1 > 500 && lo.1 > 500);
        assert!(hi.0 as f64 / hi.1 as f64 > lo.0 as f64 / lo.1 as f64);
    }

    #[test]
    fn clamping_never_needed() {
        let g = Generator::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let p = g.sample_profile(&mut rng, "x");
            for (t, v) in g.probabilities(&p) {
                assert!(v > 0.01 && v < 0.99, "{t}: {v}");
            }
        }
    }

    #[test]
    fn reference_profile_gives_intercept() {
        let g = Generator::default();
        let mut f = Features::default();
        f.radiology.psma_expression = PsmaExpression::Moderate;
        let p = UnifiedProfile::with_uniform_provenance("r", f, 1.0);
        let probs = g.probabilities(&p);
        for t in Target::ALL {
            assert_eq!(probs[&t], sigmoid(g.params.outcome.intercepts.get(t)));
        }
    }

    #[test]
    fn tier_rule_examples() {
        let probs = |a: f64, b: f64| BTreeMap::from([(Target::PsaResponse, a), (Target::OsGt12m, b)]);
        let good = Outcome { psa_response: true, os_gt_12m: true };
        // alarming narrative over a good outcome
        assert_eq!(classify_tier(&probs(0.9, 0.9), &good, 3), Tier::Misleading);
        assert_eq!(classify_tier(&probs(0.9, 0.9), &good, -2), Tier::Clear);
        assert_eq!(classify_tier(&probs(0.9, 0.5), &good, -2), Tier::Ambiguous);
        assert_eq!(classify_tier(&probs(0.9, 0.9), &good, 0), Tier::Ambiguous);
        let bad = Outcome { psa_response: false, os_gt_12m: false };
        assert_eq!(classify_tier(&probs(0.1, 0.05), &bad, 2), Tier::Clear);
        assert_eq!(classify_tier(&probs(0.1, 0.05), &bad, -3), Tier::Misleading);
    }

    #[test]
    fn mix_counts() {
        assert_eq!(TierMix::default().counts(400), [200, 120, 80]);
        assert_eq!(TierMix::default().counts(7).iter().sum::<usize>(), 7);
        assert!(TierMix { clear: 0.5, ambiguous: 0.5, misleading: 0.5 }.validate().is_err());
        assert!(Generator::default().generate(10, &TierMix { clear: 0.9, ambiguous: 0.3, misleading: -0.2 }, 1).is_err());
    }

    #[test]
    fn cohort_is_deterministic_and_verified() {
        let a = small_cohort(9);
        let b = small_cohort(9);
        assert_eq!(a.manifest.sha256(), b.manifest.sha256());
        assert_eq!(a.cases, b.cases);
        assert_ne!(a.manifest.documents_sha256, small_cohort(10).manifest.documents_sha256);
        assert_eq!(a.manifest.tier_counts[&Tier::Clear], 20);
        assert_eq!(a.manifest.tier_counts[&Tier::Ambiguous], 12);
        assert_eq!(a.manifest.tier_counts[&Tier::Misleading], 8);
        assert!(a.manifest.verification.is_complete(), "{:?}", a.manifest.verification);
        for c in &a.cases {
            assert_eq!(render_documents(&c.latent, 9), c.record);
        }
    }

    #[test]
    fn documents_carry_their_cues() {
        for c in &small_cohort(4).cases {
            let (alarm, reassure) = count_cues(&c.record);
            assert_eq!(alarm as i32 - reassure as i32, c.latent.surface_score);
            if c.latent.tier == Tier::Misleading {
                if c.latent.surface_score > 0 {
                    assert!(alarm >= 2);
                } else {
                    assert!(reassure >= 2);
                }
            }
        }
    }

    #[test]
    fn stored_intercepts_are_calibrated() {
        let g = Generator::default();
        let c = g.calibrate(&TierMix::default(), CALIBRATION_SAMPLES, 2024).unwrap();
        for t in Target::ALL {
            let stored = g.params.outcome.intercepts.get(t);
            assert!(libm::fabs(c.get(t) - stored) < 0.05, "{t}: stored {stored}, recalibrated {}", c.get(t));
        }
    }
}
