//! EHR cohort model: codes, visits, patients, plus task labelling,
//! splitting and persistence.

mod generate;
mod io;
mod split;
mod tasks;

pub use generate::{
    generate_synthetic_cohort, ClusterProfile, GeneratorConfig, HazardConfig, MortalityTruth,
    PlantedTruth,
};
pub use io::{load_codes, load_dataset, save_codes, save_dataset, write_codes, write_dataset};
pub use split::{split, SplitSpec, Splits};
pub use tasks::{
    derive_task_samples, los_bin, sample_for_prefix, sliding_window_augment, Derived, Label,
    Task, TaskSample, DRUG_DIM, LOS_CLASSES, PHENOTYPE_DIM, PHENOTYPE_GROUPS,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EhrError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("dataset is empty")]
    Empty,
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EhrError>;

/// Code identifier. `0` is the padding entity and never appears in visits.
pub type CodeId = u32;

pub const PADDING: CodeId = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CodeKind {
    #[serde(rename = "D")]
    Diagnosis,
    #[serde(rename = "P")]
    Procedure,
    #[serde(rename = "M")]
    Medication,
}

impl CodeKind {
    pub fn letter(self) -> char {
        match self {
            CodeKind::Diagnosis => 'D',
            CodeKind::Procedure => 'P',
            CodeKind::Medication => 'M',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedicalCode {
    pub id: CodeId,
    pub name: String,
    pub kind: CodeKind,
}

/// Code vocabulary with dense ids `1..=n` (id 0 is the implicit padding row).
///
/// Medications map to drug-label slots by their rank among medications;
/// diagnoses map to one of the phenotype groups by rank modulo the group
/// count.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CodeTable {
    codes: Vec<MedicalCode>,
    slot: Vec<Option<usize>>,
    by_name: std::collections::HashMap<String, CodeId>,
}

impl CodeTable {
    pub fn new(codes: Vec<MedicalCode>) -> Result<Self> {
        for (i, c) in codes.iter().enumerate() {
            if c.id as usize != i + 1 {
                return Err(EhrError::Invalid(format!(
                    "code ids must be dense from 1; position {} has id {}",
                    i + 1,
                    c.id
                )));
            }
        }
        let mut by_name = std::collections::HashMap::with_capacity(codes.len());
        for c in &codes {
            if by_name.insert(c.name.clone(), c.id).is_some() {
                return Err(EhrError::Invalid(format!("duplicate code name {:?}", c.name)));
            }
        }
        let (mut n_med, mut n_diag) = (0usize, 0usize);
        let mut slot = vec![None; codes.len() + 1];
        for c in &codes {
            match c.kind {
                CodeKind::Medication => {
                    slot[c.id as usize] = Some(n_med);
                    n_med += 1;
                }
                CodeKind::Diagnosis => {
                    slot[c.id as usize] = Some(n_diag % PHENOTYPE_GROUPS);
                    n_diag += 1;
                }
                CodeKind::Procedure => {}
            }
        }
        if n_med > DRUG_DIM - 1 {
            return Err(EhrError::Invalid(format!(
                "{n_med} medications exceed the {} drug-label slots",
                DRUG_DIM - 1
            )));
        }
        Ok(Self { codes, slot, by_name })
    }

    /// Number of entity rows including padding.
    pub fn len(&self) -> usize {
        self.codes.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Real codes (without padding).
    pub fn codes(&self) -> &[MedicalCode] {
        &self.codes
    }

    pub fn get(&self, id: CodeId) -> Option<&MedicalCode> {
        if id == PADDING {
            return None;
        }
        self.codes.get(id as usize - 1)
    }

    pub fn kind(&self, id: CodeId) -> Option<CodeKind> {
        self.get(id).map(|c| c.kind)
    }

    pub fn name(&self, id: CodeId) -> Option<&str> {
        self.get(id).map(|c| c.name.as_str())
    }

    pub fn by_name(&self, name: &str) -> Option<&MedicalCode> {
        self.by_name.get(name).and_then(|id| self.get(*id))
    }

    pub fn ids_of(&self, kind: CodeKind) -> Vec<CodeId> {
        self.codes.iter().filter(|c| c.kind == kind).map(|c| c.id).collect()
    }

    /// Drug-label slot of a medication code.
    pub fn drug_slot(&self, id: CodeId) -> Option<usize> {
        match self.kind(id)? {
            CodeKind::Medication => self.slot[id as usize],
            _ => None,
        }
    }

    /// Phenotype group of a diagnosis code.
    pub fn phenotype_group(&self, id: CodeId) -> Option<usize> {
        match self.kind(id)? {
            CodeKind::Diagnosis => self.slot[id as usize],
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    /// Sorted, deduplicated code ids.
    pub codes: Vec<CodeId>,
    #[serde(rename = "admit")]
    pub admit_time: f64,
    #[serde(rename = "discharge")]
    pub discharge_time: f64,
    #[serde(rename = "died")]
    pub died_during: bool,
}

impl Visit {
    pub fn duration(&self) -> f64 {
        self.discharge_time - self.admit_time
    }

    pub fn codes_of<'a>(&'a self, table: &'a CodeTable, kind: CodeKind) -> impl Iterator<Item = CodeId> + 'a {
        self.codes.iter().copied().filter(move |c| table.kind(*c) == Some(kind))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: u64,
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    pub fn validate(&self, table: &CodeTable) -> Result<()> {
        let pid = self.patient_id;
        if self.visits.is_empty() {
            return Err(EhrError::Invalid(format!("patient {pid} has no visits")));
        }
        for (j, v) in self.visits.iter().enumerate() {
            if v.codes.is_empty() {
                return Err(EhrError::Invalid(format!("patient {pid} visit {j} has no codes")));
            }
            if !(v.admit_time.is_finite() && v.discharge_time.is_finite()) || v.discharge_time < v.admit_time {
                return Err(EhrError::Invalid(format!(
                    "patient {pid} visit {j}: discharge before admission"
                )));
            }
            if let Some(c) = v.codes.iter().find(|c| table.get(**c).is_none()) {
                return Err(EhrError::Invalid(format!("patient {pid} visit {j}: unknown code {c}")));
            }
            if v.codes.windows(2).any(|w| w[0] >= w[1]) {
                return Err(EhrError::Invalid(format!(
                    "patient {pid} visit {j}: codes must be sorted and unique"
                )));
            }
        }
        if self.visits.windows(2).any(|w| w[1].admit_time <= w[0].admit_time) {
            return Err(EhrError::Invalid(format!(
                "patient {pid}: visits must have strictly increasing admission times"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EhrDataset {
    pub codes: CodeTable,
    pub patients: Vec<PatientRecord>,
}

/// Summary row in the shape of the usual dataset-statistics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub patients: usize,
    pub visits: usize,
    pub codes: usize,
    pub visits_per_patient: f64,
    pub codes_per_visit: f64,
}

impl EhrDataset {
    pub fn new(codes: CodeTable, patients: Vec<PatientRecord>) -> Result<Self> {
        for p in &patients {
            p.validate(&codes)?;
        }
        Ok(Self { codes, patients })
    }

    pub fn patient(&self, patient_id: u64) -> Option<&PatientRecord> {
        self.patients.iter().find(|p| p.patient_id == patient_id)
    }

    pub fn stats(&self) -> DatasetStats {
        let visits: usize = self.patients.iter().map(|p| p.visits.len()).sum();
        let code_count: usize = self.patients.iter().flat_map(|p| &p.visits).map(|v| v.codes.len()).sum();
        DatasetStats {
            patients: self.patients.len(),
            visits,
            codes: self.codes.codes().len(),
            visits_per_patient: visits as f64 / self.patients.len().max(1) as f64,
            codes_per_visit: code_count as f64 / visits.max(1) as f64,
        }
    }
}
