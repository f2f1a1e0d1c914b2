//! Post-hoc analyses over fusion traces: level importance, prototype heat
//! maps, top codes per prototype, prototype clustering and visit/label
//! overlap.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ehr::{CodeId, CodeKind, EhrDataset, Task};
use crate::fusion::{FusionTrace, Level};
use crate::metrics::{jaccard, kmeans, MetricError};

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("interpretation: {0}")]
    Invalid(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("interpretation io: {0}")]
    Io(#[from] std::io::Error),
    #[error("interpretation csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("interpretation json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, InterpretError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelImportance {
    pub task: String,
    pub n_samples: usize,
    pub code: f64,
    pub visit: f64,
    pub patient: f64,
}

/// Mean fusion weight of each level over the traces.
pub fn level_importance(traces: &[FusionTrace], task: Task) -> Result<LevelImportance> {
    if traces.is_empty() {
        return Err(InterpretError::Invalid("no traces".into()));
    }
    let mut sum = [0.0; 3];
    for t in traces {
        sum.iter_mut().zip(t.beta).for_each(|(s, b)| *s += b);
    }
    let n = traces.len() as f64;
    Ok(LevelImportance {
        task: task.to_string(),
        n_samples: traces.len(),
        code: sum[0] / n,
        visit: sum[1] / n,
        patient: sum[2] / n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeHeatmap {
    pub level: Level,
    /// Label key of each row, ascending.
    pub labels: Vec<usize>,
    /// Retained prototype indices, most important first.
    pub prototypes: Vec<usize>,
    /// `labels × prototypes` mean attention weights.
    pub matrix: Vec<Vec<f64>>,
}

/// Mean attention per label and prototype, keeping the `top_k` prototypes
/// with the largest overall mean.
pub fn prototype_heatmap(traces: &[FusionTrace], labels: &[usize], level: Level, top_k: usize) -> Result<PrototypeHeatmap> {
    if traces.len() != labels.len() {
        return Err(InterpretError::Invalid(format!("{} traces but {} labels", traces.len(), labels.len())));
    }
    let m = traces.first().map_or(0, |t| t.proto_attn.get(level).len());
    if m == 0 {
        return Err(InterpretError::Invalid(format!("no {} prototype attention in traces", level.as_str())));
    }
    if traces.iter().any(|t| t.proto_attn.get(level).len() != m) {
        return Err(InterpretError::Invalid("traces disagree on the prototype count".into()));
    }
    let mut overall = vec![0.0; m];
    let mut rows: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (t, l) in traces.iter().zip(labels) {
        let a = t.proto_attn.get(level);
        let row = rows.entry(*l).or_insert_with(|| (vec![0.0; m], 0));
        row.1 += 1;
        for j in 0..m {
            row.0[j] += a[j];
            overall[j] += a[j];
        }
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|a, b| overall[*b].total_cmp(&overall[*a]).then(a.cmp(b)));
    order.truncate(top_k.min(m));
    Ok(PrototypeHeatmap {
        level,
        labels: rows.keys().copied().collect(),
        matrix: rows
            .values()
            .map(|(s, n)| order.iter().map(|j| s[*j] / *n as f64).collect())
            .collect(),
        prototypes: order,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeCount {
    pub code: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeCodes {
    pub prototype: usize,
    pub n_patients: usize,
    pub diagnoses: Vec<CodeCount>,
    pub procedures: Vec<CodeCount>,
}

fn top_counts(counts: &BTreeMap<CodeId, usize>, ds: &EhrDataset, k: usize) -> Vec<CodeCount> {
    let mut v: Vec<(CodeId, usize)> = counts.iter().map(|(c, n)| (*c, *n)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter()
        .take(k)
        .map(|(c, count)| CodeCount {
            code: ds.codes.name(c).unwrap_or("?").to_string(),
            count,
        })
        .collect()
}

/// For each prototype of `level`, ranks patients by their attention to it
/// and counts the diagnosis and procedure codes of those patients' last
/// visits. Each patient is represented by their highest-weight trace.
pub fn top_codes_per_prototype(
    traces: &[FusionTrace],
    ds: &EhrDataset,
    level: Level,
    top_patients: usize,
    top_codes: usize,
) -> Result<Vec<PrototypeCodes>> {
    let m = traces.first().map_or(0, |t| t.proto_attn.get(level).len());
    if m == 0 {
        return Err(InterpretError::Invalid(format!("no {} prototype attention in traces", level.as_str())));
    }
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let mut best: BTreeMap<u64, f64> = BTreeMap::new();
        for t in traces {
            let w = *t
                .proto_attn
                .get(level)
                .get(j)
                .ok_or_else(|| InterpretError::Invalid("traces disagree on the prototype count".into()))?;
            let e = best.entry(t.patient_id).or_insert(f64::NEG_INFINITY);
            *e = e.max(w);
        }
        let mut ranked: Vec<(u64, f64)> = best.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        if ranked.len() < top_patients {
            log::warn!("prototype {j}: only {} patients available, fewer than {top_patients}", ranked.len());
        }
        ranked.truncate(top_patients);
        let mut diag = BTreeMap::new();
        let mut proc = BTreeMap::new();
        for (pid, _) in &ranked {
            let p = ds
                .patient(*pid)
                .ok_or_else(|| InterpretError::Invalid(format!("trace for unknown patient {pid}")))?;
            let Some(last) = p.visits.last() else { continue };
            for c in &last.codes {
                match ds.codes.kind(*c) {
                    Some(CodeKind::Diagnosis) => *diag.entry(*c).or_insert(0) += 1,
                    Some(CodeKind::Procedure) => *proc.entry(*c).or_insert(0) += 1,
                    _ => {}
                }
            }
        }
        out.push(PrototypeCodes {
            prototype: j,
            n_patients: ranked.len(),
            diagnoses: top_counts(&diag, ds, top_codes),
            procedures: top_counts(&proc, ds, top_codes),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSilhouette {
    pub level: Level,
    pub k: usize,
    pub n_points: usize,
    /// `None` when the level carries no attention (ablated).
    pub silhouette: Option<f64>,
    pub degenerate: bool,
}

/// k-means over each level's per-sample attention vectors. Always returns
/// one entry per level in code, visit, patient order.
pub fn prototype_cluster_eval(traces: &[FusionTrace], k: usize, seed: u64) -> Result<Vec<LevelSilhouette>> {
    if k == 0 {
        return Err(InterpretError::Invalid("k must be positive".into()));
    }
    let mut out = Vec::with_capacity(3);
    for level in Level::ALL {
        let points: Vec<Vec<f64>> = traces.iter().map(|t| t.proto_attn.get(level).to_vec()).collect();
        if points.is_empty() || points[0].is_empty() {
            out.push(LevelSilhouette {
                level,
                k,
                n_points: points.len(),
                silhouette: None,
                degenerate: true,
            });
            continue;
        }
        let distinct: BTreeSet<Vec<u64>> = points.iter().map(|p| p.iter().map(|x| x.to_bits()).collect()).collect();
        let degenerate = distinct.len() < 2;
        if degenerate {
            log::warn!("{} prototype attention is identical for every sample", level.as_str());
        }
        let kk = k.min(distinct.len());
        let r = kmeans(&points, kk, seed)?;
        out.push(LevelSilhouette {
            level,
            k: kk,
            n_points: points.len(),
            silhouette: Some(r.silhouette),
            degenerate,
        });
    }
    Ok(out)
}

/// Mean overlap between each earlier visit and the final visit's label set:
/// medication codes for `Task::Drug`, phenotype groups of diagnoses for
/// `Task::Phenotype`. Averaged over visits, then over patients with at
/// least two visits.
pub fn jaccard_diagnostic(ds: &EhrDataset, task: Task) -> Result<f64> {
    let items = |codes: &[CodeId]| -> BTreeSet<usize> {
        codes
            .iter()
            .filter_map(|c| match task {
                Task::Drug => ds.codes.drug_slot(*c),
                _ => ds.codes.phenotype_group(*c),
            })
            .collect()
    };
    if !matches!(task, Task::Drug | Task::Phenotype) {
        return Err(InterpretError::Invalid(format!("no label set for task {task}")));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for p in &ds.patients {
        let Some((last, prior)) = p.visits.split_last() else { continue };
        if prior.is_empty() {
            continue;
        }
        let label = items(&last.codes);
        let s: f64 = prior.iter().map(|v| jaccard(&items(&v.codes), &label)).sum();
        total += s / prior.len() as f64;
        n += 1;
    }
    if n == 0 {
        return Err(InterpretError::Invalid("no patient has two or more visits".into()));
    }
    Ok(total / n as f64)
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|a, b| x[*a].total_cmp(&x[*b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(InterpretError::Invalid("spearman needs two equal-length series of length ≥ 2".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean).powi(2);
        db += (y - mean).powi(2);
    }
    if da == 0.0 || db == 0.0 {
        return Err(InterpretError::Invalid("spearman of a constant series".into()));
    }
    Ok(num / (da * db).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpretConfig {
    pub top_k: usize,
    pub top_patients: usize,
    pub top_codes: usize,
    /// Cluster count; 0 uses the number of distinct label keys.
    pub clusters: usize,
    pub seed: u64,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            top_patients: 300,
            top_codes: 5,
            clusters: 0,
            seed: 0,
        }
    }
}

fn write_heatmap(path: &Path, h: &PrototypeHeatmap) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["label".to_string()];
    header.extend(h.prototypes.iter().map(|p| format!("proto_{p}")));
    w.write_record(&header)?;
    for (l, row) in h.labels.iter().zip(&h.matrix) {
        let mut rec = vec![l.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every analysis under `out`:
/// `level_importance.csv`, `heatmap_{level}.csv`, `top_codes.json`,
/// `silhouette.csv` and, for drug/phenotype tasks, `jaccard.json`.
pub fn write_artifacts(traces: &[FusionTrace], ds: &EhrDataset, task: Task, cfg: &InterpretConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let li = level_importance(traces, task)?;
    let mut w = csv::Writer::from_path(out.join("level_importance.csv"))?;
    w.serialize(&li)?;
    w.flush()?;

    let labels: Vec<usize> = traces
        .iter()
        .map(|t| t.label.ok_or_else(|| InterpretError::Invalid(format!("trace {} has no label", t.sample))))
        .collect::<Result<_>>()?;
    for level in Level::ALL {
        if traces[0].proto_attn.get(level).is_empty() {
            continue;
        }
        let h = prototype_heatmap(traces, &labels, level, cfg.top_k)?;
        write_heatmap(&out.join(format!("heatmap_{}.csv", level.as_str())), &h)?;
    }

    if !traces[0].proto_attn.patient.is_empty() {
        let top = top_codes_per_prototype(traces, ds, Level::Patient, cfg.top_patients, cfg.top_codes)?;
        fs::write(out.join("top_codes.json"), serde_json::to_string_pretty(&top)? + "\n")?;
    }

    let k = if cfg.clusters > 0 {
        cfg.clusters
    } else {
        labels.iter().collect::<BTreeSet<_>>().len().max(1)
    };
    let sil = prototype_cluster_eval(traces, k, cfg.seed)?;
    let mut w = csv::Writer::from_path(out.join("silhouette.csv"))?;
    w.write_record(["level", "k", "n_points", "silhouette", "degenerate"])?;
    for s in &sil {
        w.serialize((s.level.as_str(), s.k, s.n_points, s.silhouette, s.degenerate))?;
    }
    w.flush()?;

    if matches!(task, Task::Drug | Task::Phenotype) {
        let j = jaccard_diagnostic(ds, task)?;
        fs::write(
            out.join("jaccard.json"),
            serde_json::to_string_pretty(&serde_json::json!({ "task": task.as_str(), "jaccard": j }))? + "\n",
        )?;
    }
    Ok(())
}
