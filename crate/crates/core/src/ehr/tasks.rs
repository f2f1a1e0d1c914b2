use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{CodeKind, CodeTable, EhrDataset, EhrError, PatientRecord, Visit};

/// Drug-recommendation label width: 201 medication slots plus a none flag.
pub const DRUG_DIM: usize = 202;
/// Phenotype groups (excluding the none flag).
pub const PHENOTYPE_GROUPS: usize = 25;
pub const PHENOTYPE_DIM: usize = PHENOTYPE_GROUPS + 1;
pub const LOS_CLASSES: usize = 10;

/// Readmission and mortality windows, in days after the reference discharge.
const WINDOW_DAYS: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Mortality,
    Readmission,
    LengthOfStay,
    Drug,
    Phenotype,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Mortality,
        Task::Readmission,
        Task::LengthOfStay,
        Task::Drug,
        Task::Phenotype,
    ];

    /// Width of the prediction head.
    pub fn output_dim(self) -> usize {
        match self {
            Task::Mortality | Task::Readmission => 1,
            Task::LengthOfStay => LOS_CLASSES,
            Task::Drug => DRUG_DIM,
            Task::Phenotype => PHENOTYPE_DIM,
        }
    }

    /// Minimum visits a patient (or prefix) needs to yield a sample.
    pub fn min_visits(self) -> usize {
        match self {
            Task::Mortality | Task::Readmission => 2,
            _ => 1,
        }
    }

    pub fn is_binary(self) -> bool {
        matches!(self, Task::Mortality | Task::Readmission)
    }

    pub fn is_multilabel(self) -> bool {
        matches!(self, Task::Drug | Task::Phenotype)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Mortality => "mortality",
            Task::Readmission => "readmission",
            Task::LengthOfStay => "length_of_stay",
            Task::Drug => "drug",
            Task::Phenotype => "phenotype",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = EhrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mortality" => Ok(Task::Mortality),
            "readmission" => Ok(Task::Readmission),
            "length_of_stay" | "los" => Ok(Task::LengthOfStay),
            "drug" | "drug_recommendation" => Ok(Task::Drug),
            "phenotype" => Ok(Task::Phenotype),
            other => Err(EhrError::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Binary(bool),
    Class(usize),
    MultiHot(Vec<u8>),
}

impl Label {
    /// Dense float targets (binary / multi-hot); `None` for class labels.
    pub fn targets(&self) -> Option<Vec<f64>> {
        match self {
            Label::Binary(b) => Some(vec![f64::from(u8::from(*b))]),
            Label::MultiHot(v) => Some(v.iter().map(|x| f64::from(*x)).collect()),
            Label::Class(_) => None,
        }
    }

    /// Row key for per-label summaries: the class for binary and
    /// length-of-stay labels, the number of positives for multi-hot ones.
    pub fn key(&self) -> usize {
        match self {
            Label::Binary(b) => usize::from(*b),
            Label::Class(c) => *c,
            Label::MultiHot(v) => v.iter().filter(|x| **x == 1).count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSample {
    pub patient_id: u64,
    /// Number of the patient's visits this sample was derived from.
    pub prefix_len: usize,
    /// Model input: code sets of the input visits, masking already applied.
    pub input_visits: Vec<Vec<u32>>,
    pub task: Task,
    pub label: Label,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Derived {
    pub samples: Vec<TaskSample>,
    /// Patients (or prefixes) that could not produce a sample.
    pub skipped: usize,
}

/// Length-of-stay class for a stay of `days`.
///
/// `0` for under a day, `y` for `y ≤ t < y+1` with `y ∈ 1..=7`, `8` for
/// `8 ≤ t ≤ 14` and `9` beyond 14 days.
pub fn los_bin(days: f64) -> usize {
    let t = days.max(0.0);
    if t < 1.0 {
        0
    } else if t < 8.0 {
        t.floor() as usize
    } else if t <= 14.0 {
        8
    } else {
        9
    }
}

fn multi_hot(dim: usize, hot: impl IntoIterator<Item = usize>) -> Vec<u8> {
    let mut v = vec![0u8; dim];
    for i in hot {
        v[i] = 1;
    }
    if v[..dim - 1].iter().all(|x| *x == 0) {
        v[dim - 1] = 1;
    }
    v
}

fn without_kind(table: &CodeTable, visit: &Visit, kind: CodeKind) -> Vec<u32> {
    visit.codes.iter().copied().filter(|c| table.kind(*c) != Some(kind)).collect()
}

/// Builds the sample for the first `k` visits of a patient, or `None` when
/// the prefix is too short or the masked input would be empty.
pub fn sample_for_prefix(table: &CodeTable, patient: &PatientRecord, k: usize, task: Task) -> Option<TaskSample> {
    if k < task.min_visits() || k > patient.visits.len() {
        return None;
    }
    let visits = &patient.visits[..k];
    let last = &visits[k - 1];
    let codes = |vs: &[Visit]| vs.iter().map(|v| v.codes.clone()).collect::<Vec<_>>();
    let (input_visits, label) = match task {
        Task::Mortality | Task::Readmission => {
            let prev = &visits[k - 2];
            let gap = if task == Task::Mortality {
                last.discharge_time - prev.discharge_time
            } else {
                last.admit_time - prev.discharge_time
            };
            let within = gap <= WINDOW_DAYS;
            let y = match task {
                Task::Mortality => last.died_during && within,
                _ => within,
            };
            (codes(&visits[..k - 1]), Label::Binary(y))
        }
        Task::LengthOfStay => (codes(visits), Label::Class(los_bin(last.duration()))),
        Task::Drug | Task::Phenotype => {
            let (masked_kind, dim) = if task == Task::Drug {
                (CodeKind::Medication, DRUG_DIM)
            } else {
                (CodeKind::Diagnosis, PHENOTYPE_DIM)
            };
            let hot: Vec<usize> = last
                .codes
                .iter()
                .filter_map(|c| match task {
                    Task::Drug => table.drug_slot(*c),
                    _ => table.phenotype_group(*c),
                })
                .collect();
            let mut input = codes(&visits[..k - 1]);
            let masked = without_kind(table, last, masked_kind);
            if !masked.is_empty() {
                input.push(masked);
            }
            if input.is_empty() {
                return None;
            }
            (input, Label::MultiHot(multi_hot(dim, hot)))
        }
    };
    Some(TaskSample {
        patient_id: patient.patient_id,
        prefix_len: k,
        input_visits,
        task,
        label,
    })
}

/// One sample per patient over the full visit sequence.
pub fn derive_task_samples(ds: &EhrDataset, task: Task) -> Derived {
    let mut out = Derived::default();
    for p in &ds.patients {
        match sample_for_prefix(&ds.codes, p, p.visits.len(), task) {
            Some(s) => out.samples.push(s),
            None => out.skipped += 1,
        }
    }
    out
}

/// Expands every sample into all of its patient's visit prefixes that can
/// carry a label. Mortality samples are returned untouched.
pub fn sliding_window_augment(ds: &EhrDataset, samples: Vec<TaskSample>, task: Task) -> Vec<TaskSample> {
    if task == Task::Mortality {
        return samples;
    }
    let mut out = Vec::with_capacity(samples.len() * 2);
    for s in samples {
        let Some(p) = ds.patient(s.patient_id) else {
            out.push(s);
            continue;
        };
        for k in task.min_visits()..=s.prefix_len {
            if let Some(x) = sample_for_prefix(&ds.codes, p, k, task) {
                out.push(x);
            }
        }
    }
    out
}
