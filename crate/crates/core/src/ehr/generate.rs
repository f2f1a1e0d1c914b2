//! Synthetic cohorts with a planted, documented outcome model.
//!
//! Every patient belongs to a latent cluster. A cluster owns a handful of
//! signature codes per kind, a stay-length profile and a readmission-gap
//! profile. Each signature diagnosis has a medication that treats it and
//! is usually prescribed alongside it.
//!
//! Mortality for a patient with at least two visits is Bernoulli with
//! logit `base + weight * (cluster_coef[c] + sum of code_coef over the
//! penultimate visit)`. A positive draw places a short fatal visit within
//! the 30-day window after the penultimate discharge. A negative draw may
//! still end in a death, but only after the window closes.
//!
//! The optional hazard block adds many rare diagnoses, half of them
//! hazardous. Each rare code is linked in the planted graph to one of two
//! hub diagnoses that never occur in visits; only hazardous codes carry
//! mortality weight. Without the graph the model sees each rare code a
//! handful of times; with it, the hub relation ties them together.

use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use super::{CodeId, CodeKind, CodeTable, EhrDataset, EhrError, MedicalCode, PatientRecord, Result, Visit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HazardConfig {
    /// Rare diagnoses that raise mortality.
    pub n_hazard: usize,
    /// Rare diagnoses with no effect.
    pub n_decoy: usize,
    /// Probability a visit carries one rare code.
    pub rare_prob: f64,
    /// Logit contribution of a hazard code in the penultimate visit.
    pub effect: f64,
}

impl Default for HazardConfig {
    fn default() -> Self {
        Self {
            n_hazard: 120,
            n_decoy: 120,
            rare_prob: 0.7,
            effect: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub n_diagnoses: usize,
    pub n_procedures: usize,
    pub n_medications: usize,
    pub n_clusters: usize,
    /// Signature codes per kind per cluster.
    pub signature_size: usize,
    /// Chance that a sampled code comes from the cluster signature.
    pub signature_prob: f64,
    pub mean_visits: f64,
    pub max_visits: usize,
    pub diagnoses_per_visit: f64,
    pub procedures_per_visit: f64,
    /// Chance a diagnosis brings its treating medication.
    pub treat_prob: f64,
    pub mortality_base: f64,
    /// Global scale on every planted mortality effect.
    pub effect_weight: f64,
    /// Cluster coefficients are spread evenly over `[-x, x]`.
    pub cluster_effect: f64,
    /// Fraction of regular diagnoses that carry a risk coefficient.
    pub risk_fraction: f64,
    pub risk_effect: f64,
    /// Chance a surviving patient dies later, outside the window.
    pub late_death_prob: f64,
    pub hazard: Option<HazardConfig>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_patients: 1000,
            n_diagnoses: 60,
            n_procedures: 30,
            n_medications: 60,
            n_clusters: 4,
            signature_size: 6,
            signature_prob: 0.8,
            mean_visits: 2.63,
            max_visits: 12,
            diagnoses_per_visit: 4.0,
            procedures_per_visit: 2.0,
            treat_prob: 0.85,
            mortality_base: -1.0,
            effect_weight: 1.0,
            cluster_effect: 8.0,
            risk_fraction: 0.15,
            risk_effect: 1.5,
            late_death_prob: 0.03,
            hazard: None,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        let err = |m: String| Err(EhrError::Config(m));
        if self.n_patients < 2 {
            return err(format!("need at least 2 patients, got {}", self.n_patients));
        }
        if self.n_clusters < 1 || self.n_clusters > self.n_patients {
            return err(format!(
                "cluster count {} must be in 1..={}",
                self.n_clusters, self.n_patients
            ));
        }
        let kinds = [self.n_diagnoses, self.n_procedures, self.n_medications];
        if kinds.iter().any(|n| *n < 2) || kinds.iter().sum::<usize>() < 6 {
            return err("need at least two codes of every kind".into());
        }
        if self.n_medications > super::DRUG_DIM - 1 {
            return err(format!("at most {} medications", super::DRUG_DIM - 1));
        }
        if self.signature_size < 1 || kinds.iter().any(|n| *n < self.signature_size) {
            return err("signature size must fit in every code kind".into());
        }
        if self.mean_visits < 1.0 || self.max_visits < 1 {
            return err("mean visits must be at least 1".into());
        }
        let probs = [self.signature_prob, self.treat_prob, self.risk_fraction, self.late_death_prob];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return err("probabilities must lie in [0, 1]".into());
        }
        if self.diagnoses_per_visit < 1.0 || self.procedures_per_visit < 0.0 {
            return err("per-visit code counts too small".into());
        }
        if let Some(h) = &self.hazard {
            if h.n_hazard == 0 || !(0.0..=1.0).contains(&h.rare_prob) {
                return err("hazard block needs codes and a probability in [0, 1]".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProfile {
    pub diagnoses: Vec<CodeId>,
    pub procedures: Vec<CodeId>,
    pub medications: Vec<CodeId>,
    pub mortality_coef: f64,
    /// Log-mean of stay length in days.
    pub los_log_mean: f64,
    /// Log-mean of the gap between discharge and next admission.
    pub gap_log_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MortalityTruth {
    pub base: f64,
    pub weight: f64,
    /// Nonzero per-code coefficients.
    pub code_coef: Vec<(CodeId, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub clusters: Vec<ClusterProfile>,
    /// Cluster of each patient, indexed like the dataset.
    pub patient_cluster: Vec<usize>,
    /// Diagnosis and the medication that treats it.
    pub treats: Vec<(CodeId, CodeId)>,
    pub mortality: MortalityTruth,
    pub hazard_codes: Vec<CodeId>,
    /// Planted graph as `(head, relation, tail)` code names.
    pub kg_facts: Vec<(String, String, String)>,
}

impl PlantedTruth {
    /// Generating logit for a patient of `cluster` whose penultimate visit
    /// holds `codes`.
    pub fn mortality_logit(&self, cluster: usize, codes: &[CodeId]) -> f64 {
        let m = &self.mortality;
        let codes_part: f64 = codes
            .iter()
            .filter_map(|c| m.code_coef.iter().find(|(k, _)| k == c).map(|(_, v)| *v))
            .sum();
        m.base + m.weight * (self.clusters[cluster].mortality_coef + codes_part)
    }

    /// Signature diagnosis/medication pairs of each cluster.
    pub fn cluster_pairs(&self) -> Vec<(CodeId, CodeId)> {
        let mut out = BTreeSet::new();
        for c in &self.clusters {
            for d in &c.diagnoses {
                if let Some((_, m)) = self.treats.iter().find(|(x, _)| x == d) {
                    out.insert((*d, *m));
                }
            }
        }
        out.into_iter().collect()
    }
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|p| p.sample(rng) as usize).unwrap_or(0)
}

fn pick(rng: &mut ChaCha8Rng, signature: &[CodeId], all: &[CodeId], sig_prob: f64) -> CodeId {
    let pool = if rng.random_bool(sig_prob) { signature } else { all };
    *pool.choose(rng).expect("nonempty pool")
}

struct Vocab {
    table: CodeTable,
    diagnoses: Vec<CodeId>,
    procedures: Vec<CodeId>,
    medications: Vec<CodeId>,
    hazard: Vec<CodeId>,
    decoy: Vec<CodeId>,
    hubs: Option<(CodeId, CodeId)>,
}

fn build_vocab(cfg: &GeneratorConfig) -> Result<Vocab> {
    let mut codes = Vec::new();
    let mut push = |name: String, kind: CodeKind| -> CodeId {
        let id = codes.len() as CodeId + 1;
        codes.push(MedicalCode { id, name, kind });
        id
    };
    let diagnoses: Vec<_> = (0..cfg.n_diagnoses).map(|i| push(format!("D{i:03}"), CodeKind::Diagnosis)).collect();
    let procedures: Vec<_> = (0..cfg.n_procedures).map(|i| push(format!("P{i:03}"), CodeKind::Procedure)).collect();
    let medications: Vec<_> = (0..cfg.n_medications).map(|i| push(format!("M{i:03}"), CodeKind::Medication)).collect();
    let (mut hazard, mut decoy, mut hubs) = (Vec::new(), Vec::new(), None);
    if let Some(h) = &cfg.hazard {
        hazard = (0..h.n_hazard).map(|i| push(format!("DH{i:03}"), CodeKind::Diagnosis)).collect();
        decoy = (0..h.n_decoy).map(|i| push(format!("DR{i:03}"), CodeKind::Diagnosis)).collect();
        hubs = Some((
            push("D_HUB_A".into(), CodeKind::Diagnosis),
            push("D_HUB_B".into(), CodeKind::Diagnosis),
        ));
    }
    Ok(Vocab {
        table: CodeTable::new(codes)?,
        diagnoses,
        procedures,
        medications,
        hazard,
        decoy,
        hubs,
    })
}

/// Draws a cohort and the parameters that generated it.
pub fn generate_synthetic_cohort(cfg: &GeneratorConfig, seed: u64) -> Result<(EhrDataset, PlantedTruth)> {
    cfg.validate()?;
    let vocab = build_vocab(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let treats: Vec<(CodeId, CodeId)> = vocab
        .diagnoses
        .iter()
        .enumerate()
        .map(|(i, d)| (*d, vocab.medications[i % vocab.medications.len()]))
        .collect();

    let k = cfg.n_clusters;
    let clusters: Vec<ClusterProfile> = (0..k)
        .map(|c| {
            let sample = |rng: &mut ChaCha8Rng, pool: &[CodeId]| {
                let mut v: Vec<CodeId> = pool.choose_multiple(rng, cfg.signature_size).copied().collect();
                v.sort_unstable();
                v
            };
            let diagnoses = sample(&mut rng, &vocab.diagnoses);
            let procedures = sample(&mut rng, &vocab.procedures);
            let mut medications: Vec<CodeId> = diagnoses
                .iter()
                .map(|d| treats.iter().find(|(x, _)| x == d).expect("treated").1)
                .collect();
            medications.sort_unstable();
            medications.dedup();
            let t = if k == 1 { 0.5 } else { c as f64 / (k - 1) as f64 };
            let coef = cfg.cluster_effect * (2.0 * t - 1.0);
            ClusterProfile {
                diagnoses,
                procedures,
                medications,
                mortality_coef: coef,
                los_log_mean: (1.5 + 9.0 * t).ln(),
                gap_log_mean: (25.0 + 150.0 * (1.0 - t)).ln(),
            }
        })
        .collect();

    let mut code_coef: Vec<(CodeId, f64)> = vocab
        .diagnoses
        .choose_multiple(&mut rng, (cfg.risk_fraction * cfg.n_diagnoses as f64).round() as usize)
        .map(|d| (*d, cfg.risk_effect))
        .collect();
    if let Some(h) = &cfg.hazard {
        code_coef.extend(vocab.hazard.iter().map(|d| (*d, h.effect)));
    }
    code_coef.sort_by_key(|(c, _)| *c);

    let mut kg_facts = Vec::new();
    for (d, m) in &treats {
        let name = |c: CodeId| vocab.table.name(c).expect("known").to_string();
        kg_facts.push((name(*m), "treats".to_string(), name(*d)));
    }
    if let Some((hub_a, hub_b)) = vocab.hubs {
        let name = |c: CodeId| vocab.table.name(c).expect("known").to_string();
        for c in &vocab.hazard {
            kg_facts.push((name(*c), "subtype_of".to_string(), name(hub_a)));
        }
        for c in &vocab.decoy {
            kg_facts.push((name(*c), "subtype_of".to_string(), name(hub_b)));
        }
    }

    let mut truth = PlantedTruth {
        clusters,
        patient_cluster: Vec::with_capacity(cfg.n_patients),
        treats,
        mortality: MortalityTruth {
            base: cfg.mortality_base,
            weight: cfg.effect_weight,
            code_coef,
        },
        hazard_codes: vocab.hazard.clone(),
        kg_facts,
    };

    let mut patients = Vec::with_capacity(cfg.n_patients);
    for i in 0..cfg.n_patients {
        // Round-robin keeps every cluster populated.
        let c = i % k;
        let mut prng = ChaCha8Rng::seed_from_u64(seed);
        prng.set_stream(i as u64 + 1);
        patients.push(generate_patient(cfg, &vocab, &truth, c, i as u64 + 1, &mut prng));
        truth.patient_cluster.push(c);
    }
    Ok((EhrDataset::new(vocab.table, patients)?, truth))
}

fn draw_codes(cfg: &GeneratorConfig, vocab: &Vocab, truth: &PlantedTruth, prof: &ClusterProfile, chronic: &[CodeId], rng: &mut ChaCha8Rng) -> Vec<CodeId> {
    let mut set: BTreeSet<CodeId> = chronic.iter().copied().collect();
    let n_diag = 1 + poisson(rng, cfg.diagnoses_per_visit - 1.0);
    for _ in 0..n_diag {
        set.insert(pick(rng, &prof.diagnoses, &vocab.diagnoses, cfg.signature_prob));
    }
    for _ in 0..poisson(rng, cfg.procedures_per_visit) {
        set.insert(pick(rng, &prof.procedures, &vocab.procedures, cfg.signature_prob));
    }
    if let Some(h) = &cfg.hazard {
        if rng.random_bool(h.rare_prob) {
            let pool: Vec<CodeId> = vocab.hazard.iter().chain(&vocab.decoy).copied().collect();
            set.insert(*pool.choose(rng).expect("rare pool"));
        }
    }
    let diagnoses: Vec<CodeId> = set.iter().copied().collect();
    for d in diagnoses {
        if let Some((_, m)) = truth.treats.iter().find(|(x, _)| *x == d) {
            if rng.random_bool(cfg.treat_prob) {
                set.insert(*m);
            }
        }
    }
    if !set.iter().any(|c| vocab.table.kind(*c) == Some(CodeKind::Medication)) {
        set.insert(pick(rng, &prof.medications, &vocab.medications, cfg.signature_prob));
    }
    set.into_iter().collect()
}

fn generate_patient(cfg: &GeneratorConfig, vocab: &Vocab, truth: &PlantedTruth, cluster: usize, patient_id: u64, rng: &mut ChaCha8Rng) -> PatientRecord {
    let prof = &truth.clusters[cluster];
    let n_visits = (1 + poisson(rng, cfg.mean_visits - 1.0)).min(cfg.max_visits);
    let n_chronic = rng.random_range(0..=2usize);
    let chronic: Vec<CodeId> = prof.diagnoses.choose_multiple(rng, n_chronic).copied().collect();
    let los = LogNormal::new(prof.los_log_mean, 0.6).expect("valid lognormal");
    let gap = LogNormal::new(prof.gap_log_mean, 0.8).expect("valid lognormal");

    let mut visits: Vec<Visit> = Vec::with_capacity(n_visits);
    let mut t = rng.random_range(0.0..365.0);
    for j in 0..n_visits {
        let codes = draw_codes(cfg, vocab, truth, prof, &chronic, rng);
        if j > 0 {
            t = visits[j - 1].discharge_time + 1.0 + gap.sample(rng);
        }
        let stay = los.sample(rng).clamp(0.1, 60.0);
        visits.push(Visit {
            codes,
            admit_time: t,
            discharge_time: t + stay,
            died_during: false,
        });
    }

    if n_visits >= 2 {
        let prev = visits[n_visits - 2].clone();
        let p = sigmoid(truth.mortality_logit(cluster, &prev.codes));
        let last = &mut visits[n_visits - 1];
        if rng.random_bool(p) {
            let g = rng.random_range(1.0..15.0);
            let stay = los.sample(rng).min(29.0 - g).max(0.1);
            last.admit_time = prev.discharge_time + g;
            last.discharge_time = last.admit_time + stay;
            last.died_during = true;
        } else if rng.random_bool(cfg.late_death_prob) {
            if last.discharge_time - prev.discharge_time <= 30.0 {
                last.admit_time = prev.discharge_time + 31.0 + gap.sample(rng);
                last.discharge_time = last.admit_time + los.sample(rng).clamp(0.1, 60.0);
            }
            last.died_during = true;
        }
    }
    PatientRecord { patient_id, visits }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
