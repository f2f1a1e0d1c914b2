//! Ranking and classification metrics, bootstrap summaries and the
//! clustering tools used by the interpretation analyses.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ehr::{Label, Task};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("invalid metric input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(MetricError::Invalid(format!("{a} scores but {b} labels")));
    }
    if a == 0 {
        return Err(MetricError::Invalid("no samples".into()));
    }
    Ok(())
}

/// Indices sorted by descending score, split into groups of tied scores.
fn tie_groups(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in idx {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Area under the ROC curve: the chance a random positive scores above a
/// random negative, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_len(scores.len(), labels.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricError::Invalid("NaN score".into()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::Undefined("AUROC needs both classes".into()));
    }
    // Twice the Mann-Whitney count keeps the sum integral.
    let mut twice = 0u64;
    let mut neg_below = neg as u64;
    for g in tie_groups(scores) {
        let p = g.iter().filter(|i| labels[**i]).count() as u64;
        let n = g.len() as u64 - p;
        neg_below -= n;
        twice += 2 * p * neg_below + p * n;
    }
    Ok(twice as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Average precision over descending score thresholds.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_len(scores.len(), labels.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MetricError::Invalid("NaN score".into()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    if pos == 0 {
        return Err(MetricError::Undefined("AUPRC needs a positive sample".into()));
    }
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    for g in tie_groups(scores) {
        let p = g.iter().filter(|i| labels[**i]).count();
        tp += p;
        seen += g.len();
        if p > 0 {
            ap += (p as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

fn f1_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp + fp + fn_ == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// F1 of the positive class. A sample set with no positives, predicted or
/// true, scores 1.
pub fn f1_binary(pred: &[bool], labels: &[bool]) -> Result<f64> {
    check_len(pred.len(), labels.len())?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, l) in pred.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(f1_counts(tp, fp, fn_))
}

/// Unweighted mean of per-class F1 over classes that occur in either the
/// predictions or the labels.
pub fn f1_macro(pred: &[usize], labels: &[usize]) -> Result<f64> {
    check_len(pred.len(), labels.len())?;
    let classes: BTreeSet<usize> = pred.iter().chain(labels).copied().collect();
    let total: f64 = classes
        .iter()
        .map(|c| {
            let p: Vec<bool> = pred.iter().map(|x| x == c).collect();
            let l: Vec<bool> = labels.iter().map(|x| x == c).collect();
            f1_binary(&p, &l).expect("lengths checked")
        })
        .sum();
    Ok(total / classes.len() as f64)
}

/// Mean over samples of each sample's label-set F1.
pub fn f1_samples(pred: &[Vec<bool>], labels: &[Vec<bool>]) -> Result<f64> {
    check_len(pred.len(), labels.len())?;
    let mut total = 0.0;
    for (p, l) in pred.iter().zip(labels) {
        if p.len() != l.len() {
            return Err(MetricError::Invalid(format!("{} predictions but {} labels in a sample", p.len(), l.len())));
        }
        total += f1_binary(p, l)?;
    }
    Ok(total / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Auroc,
    Auprc,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Auroc, Metric::Auprc, Metric::F1];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Auroc => "auroc",
            Metric::Auprc => "auprc",
            Metric::F1 => "f1",
        }
    }

    /// Validation metric that drives early stopping for `task`.
    pub fn early_stop(task: Task) -> Metric {
        if task == Task::LengthOfStay {
            Metric::Auroc
        } else {
            Metric::Auprc
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auroc" => Ok(Metric::Auroc),
            "auprc" => Ok(Metric::Auprc),
            "f1" => Ok(Metric::F1),
            other => Err(MetricError::Invalid(format!("unknown metric {other:?}"))),
        }
    }
}

fn binary_labels(labels: &[&Label]) -> Result<Vec<bool>> {
    labels
        .iter()
        .map(|l| match l {
            Label::Binary(b) => Ok(*b),
            other => Err(MetricError::Invalid(format!("expected a binary label, got {other:?}"))),
        })
        .collect()
}

fn one_vs_rest(probs: &[&Vec<f64>], classes: &[usize], n: usize, f: fn(&[f64], &[bool]) -> Result<f64>) -> Result<f64> {
    let mut vals = Vec::new();
    for c in 0..n {
        let l: Vec<bool> = classes.iter().map(|x| *x == c).collect();
        let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        match f(&s, &l) {
            Ok(v) => vals.push(v),
            Err(MetricError::Undefined(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if vals.is_empty() {
        return Err(MetricError::Undefined("no class has both outcomes".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Task-level metric over predicted probabilities.
///
/// Binary tasks use the positive-class probability. Length of stay uses
/// macro one-vs-rest AUROC/AUPRC and macro F1 of the arg-max class.
/// Multi-label tasks pool every (sample, label) pair for AUROC/AUPRC and
/// use samples-averaged F1 at threshold 0.5.
pub fn task_metric(task: Task, metric: Metric, probs: &[&Vec<f64>], labels: &[&Label]) -> Result<f64> {
    check_len(probs.len(), labels.len())?;
    match task {
        Task::Mortality | Task::Readmission => {
            let l = binary_labels(labels)?;
            let s: Vec<f64> = probs.iter().map(|p| p[0]).collect();
            match metric {
                Metric::Auroc => auroc(&s, &l),
                Metric::Auprc => auprc(&s, &l),
                Metric::F1 => f1_binary(&s.iter().map(|p| *p >= 0.5).collect::<Vec<_>>(), &l),
            }
        }
        Task::LengthOfStay => {
            let classes: Vec<usize> = labels
                .iter()
                .map(|l| match l {
                    Label::Class(c) => Ok(*c),
                    other => Err(MetricError::Invalid(format!("expected a class label, got {other:?}"))),
                })
                .collect::<Result<_>>()?;
            let n = probs[0].len();
            match metric {
                Metric::Auroc => one_vs_rest(probs, &classes, n, auroc),
                Metric::Auprc => one_vs_rest(probs, &classes, n, auprc),
                Metric::F1 => {
                    let pred: Vec<usize> = probs
                        .iter()
                        .map(|p| (0..p.len()).fold(0, |best, i| if p[i] > p[best] { i } else { best }))
                        .collect();
                    f1_macro(&pred, &classes)
                }
            }
        }
        Task::Drug | Task::Phenotype => {
            let mut truth = Vec::with_capacity(labels.len());
            for (l, p) in labels.iter().zip(probs) {
                match l {
                    Label::MultiHot(v) if v.len() == p.len() => truth.push(v.iter().map(|x| *x == 1).collect::<Vec<bool>>()),
                    other => return Err(MetricError::Invalid(format!("expected a {}-wide multi-hot label, got {other:?}", p.len()))),
                }
            }
            match metric {
                Metric::F1 => {
                    let pred: Vec<Vec<bool>> = probs.iter().map(|p| p.iter().map(|x| *x >= 0.5).collect()).collect();
                    f1_samples(&pred, &truth)
                }
                m => {
                    let s: Vec<f64> = probs.iter().flat_map(|p| p.iter().copied()).collect();
                    let l: Vec<bool> = truth.into_iter().flatten().collect();
                    if m == Metric::Auroc {
                        auroc(&s, &l)
                    } else {
                        auprc(&s, &l)
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_resamples: usize,
    pub seed: u64,
}

/// Resample statistics of `metric` over `n` bootstrap draws of `n_items`
/// indices. Draws on which the metric is undefined (for instance a
/// resample holding a single class) are redrawn.
pub fn bootstrap<F>(n_items: usize, n: usize, seed: u64, metric: F) -> Result<(f64, f64, Vec<f64>)>
where
    F: Fn(&[usize]) -> Result<f64> + Sync,
{
    if n_items == 0 || n == 0 {
        return Err(MetricError::Invalid("bootstrap needs samples and resamples".into()));
    }
    const MAX_REDRAWS: usize = 1000;
    let values: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut idx = vec![0usize; n_items];
            for attempt in 0..MAX_REDRAWS {
                idx.iter_mut().for_each(|i| *i = rng.random_range(0..n_items));
                match metric(&idx) {
                    Ok(v) => return Ok(v),
                    Err(MetricError::Undefined(why)) => {
                        log::debug!("bootstrap resample {r} redrawn (attempt {attempt}): {why}");
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(MetricError::Undefined(format!("resample {r} stayed undefined after {MAX_REDRAWS} draws")))
        })
        .collect::<Result<_>>()?;
    // Centering on the first draw keeps a constant metric exact.
    let mean = values[0] + values.iter().map(|v| v - values[0]).sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Ok((mean, var.sqrt(), values))
}

/// Bootstrap report of a task metric over sample-level resamples.
pub fn bootstrap_task(task: Task, metric: Metric, probs: &[Vec<f64>], labels: &[Label], n: usize, seed: u64) -> Result<MetricReport> {
    check_len(probs.len(), labels.len())?;
    let (mean, std, _) = bootstrap(probs.len(), n, seed, |idx| {
        let p: Vec<&Vec<f64>> = idx.iter().map(|i| &probs[*i]).collect();
        let l: Vec<&Label> = idx.iter().map(|i| &labels[*i]).collect();
        task_metric(task, metric, &p, &l)
    })?;
    Ok(MetricReport {
        task: task.to_string(),
        metric: metric.to_string(),
        mean,
        std,
        n_resamples: n,
        seed,
    })
}

/// |A ∩ B| / |A ∪ B|, taken as 1 for two empty sets.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub silhouette: f64,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centroids.iter().enumerate() {
        let d = dist2(p, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = d.len() - 1;
            for (i, di) in d.iter().enumerate() {
                if u < *di {
                    pick = i;
                    break;
                }
                u -= di;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].clone());
        for (di, p) in d.iter_mut().zip(points) {
            *di = di.min(dist2(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, tol: f64, max_iter: usize) -> (Vec<usize>, Vec<Vec<f64>>, f64) {
    let dim = points[0].len();
    let mut assign = vec![0; points.len()];
    for _ in 0..max_iter {
        for (a, p) in assign.iter_mut().zip(points) {
            *a = nearest(p, &centroids).0;
        }
        let mut sums = vec![vec![0.0; dim]; centroids.len()];
        let mut counts = vec![0usize; centroids.len()];
        for (a, p) in assign.iter().zip(points) {
            counts[*a] += 1;
            sums[*a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        let mut shift = 0.0f64;
        for (c, (s, n)) in sums.into_iter().zip(counts).enumerate() {
            if n == 0 {
                continue;
            }
            let m: Vec<f64> = s.into_iter().map(|x| x / n as f64).collect();
            shift = shift.max(dist2(&m, &centroids[c]));
            centroids[c] = m;
        }
        if shift <= tol * tol {
            break;
        }
    }
    let mut inertia = 0.0;
    for (a, p) in assign.iter_mut().zip(points) {
        let (c, d) = nearest(p, &centroids);
        *a = c;
        inertia += d;
    }
    (assign, centroids, inertia)
}

/// k-means with k-means++ seeding, keeping the lowest-inertia of 20
/// restarts.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterReport> {
    const RESTARTS: u64 = 20;
    if k == 0 || k > points.len() {
        return Err(MetricError::Invalid(format!("k = {k} for {} points", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|x| !x.is_finite())) {
        return Err(MetricError::Invalid("points must be finite and share a dimension".into()));
    }
    let mut best: Option<(Vec<usize>, Vec<Vec<f64>>, f64)> = None;
    for r in 0..RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r);
        let run = lloyd(points, plus_plus(points, k, &mut rng), 1e-8, 300);
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (assignments, centroids, inertia) = best.expect("at least one restart");
    let silhouette = silhouette(points, &assignments)?;
    Ok(ClusterReport {
        assignments,
        centroids,
        inertia,
        silhouette,
    })
}

/// Mean silhouette with Euclidean distance. One cluster scores 0, as does
/// any point alone in its cluster.
pub fn silhouette(points: &[Vec<f64>], assignments: &[usize]) -> Result<f64> {
    check_len(points.len(), assignments.len())?;
    let clusters: BTreeSet<usize> = assignments.iter().copied().collect();
    if clusters.len() < 2 {
        return Ok(0.0);
    }
    let k = clusters.iter().max().unwrap() + 1;
    let mut size = vec![0usize; k];
    assignments.iter().for_each(|a| size[*a] += 1);
    let total: f64 = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let own = assignments[i];
            if size[own] == 1 {
                return 0.0;
            }
            let mut sum = vec![0.0; k];
            for (j, p) in points.iter().enumerate() {
                if j != i {
                    sum[assignments[j]] += dist2(&points[i], p).sqrt();
                }
            }
            let a = sum[own] / (size[own] - 1) as f64;
            let b = (0..k)
                .filter(|c| *c != own && size[*c] > 0)
                .map(|c| sum[c] / size[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m == 0.0 {
                0.0
            } else {
                (b - a) / m
            }
        })
        .sum();
    Ok(total / points.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert, prop_assume, proptest};
    use rand_distr::{Distribution, Normal};

    /// ROC area by the trapezoid rule over every threshold, counting each
    /// point from scratch.
    fn ref_auroc(s: &[f64], l: &[bool]) -> f64 {
        let mut thr: Vec<f64> = s.to_vec();
        thr.push(f64::INFINITY);
        thr.sort_by(|a, b| b.total_cmp(a));
        thr.dedup();
        let pos = l.iter().filter(|x| **x).count() as f64;
        let neg = l.len() as f64 - pos;
        let point = |t: f64| {
            let tp = s.iter().zip(l).filter(|(x, y)| **x >= t && **y).count() as f64;
            let fp = s.iter().zip(l).filter(|(x, y)| **x >= t && !**y).count() as f64;
            (fp / neg, tp / pos)
        };
        let pts: Vec<(f64, f64)> = thr.iter().map(|t| point(*t)).collect();
        pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
    }

    fn ref_auprc(s: &[f64], l: &[bool]) -> f64 {
        let mut thr: Vec<f64> = s.to_vec();
        thr.sort_by(|a, b| b.total_cmp(a));
        thr.dedup();
        let pos = l.iter().filter(|x| **x).count() as f64;
        let mut prev_r = 0.0;
        let mut ap = 0.0;
        for t in thr {
            let tp = s.iter().zip(l).filter(|(x, y)| **x >= t && **y).count() as f64;
            let k = s.iter().filter(|x| **x >= t).count() as f64;
            let r = tp / pos;
            ap += (r - prev_r) * (tp / k);
            prev_r = r;
        }
        ap
    }

    fn ref_f1(p: &[bool], l: &[bool]) -> f64 {
        let tp = p.iter().zip(l).filter(|(a, b)| **a && **b).count() as f64;
        let np = p.iter().filter(|x| **x).count() as f64;
        let nl = l.iter().filter(|x| **x).count() as f64;
        if np == 0.0 && nl == 0.0 {
            return 1.0;
        }
        if tp == 0.0 {
            return 0.0;
        }
        let (pr, re) = (tp / np, tp / nl);
        2.0 * pr * re / (pr + re)
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.8, 0.7, 0.6, 0.2], &[true, false, true, false]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(MetricError::Undefined(_))));
        assert!(auroc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(auprc(&[0.9, 0.1], &[false, true]).unwrap(), 0.5);
        assert!(auprc(&[0.9], &[false]).is_err());
    }

    #[test]
    fn auprc_of_random_scores_is_prevalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 200_000;
        let l: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.2).collect();
        let s: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let pi = l.iter().filter(|x| **x).count() as f64 / n as f64;
        assert!((auprc(&s, &l).unwrap() - pi).abs() < 0.01);
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_binary(&[true, false, true], &[true, false, true]).unwrap(), 1.0);
        assert_eq!(f1_binary(&[false, false], &[true, false]).unwrap(), 0.0);
        // Precision 2/3, recall 1/2.
        let p = [true, true, true, false, false];
        let l = [true, true, false, true, true];
        assert!((f1_binary(&p, &l).unwrap() - 4.0 / 7.0).abs() < 1e-15);
        assert_eq!(f1_macro(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        // Class 0: F1 2/3, class 1: F1 0, class 2: F1 1.
        assert!((f1_macro(&[0, 0, 2], &[0, 1, 2]).unwrap() - (2.0 / 3.0 + 1.0) / 3.0).abs() < 1e-15);
        let s = f1_samples(&[vec![true, false], vec![false, false]], &[vec![true, true], vec![false, false]]).unwrap();
        assert!((s - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn oracle_agreement_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 200 {
            let n = rng.random_range(2..=20);
            // Coarse scores force ties.
            let s: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..6u8)) / 5.0).collect();
            let l: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            if l.iter().all(|x| *x) || l.iter().all(|x| !*x) {
                continue;
            }
            assert!((auroc(&s, &l).unwrap() - ref_auroc(&s, &l)).abs() < 1e-12);
            assert!((auprc(&s, &l).unwrap() - ref_auprc(&s, &l)).abs() < 1e-12);
            let p: Vec<bool> = s.iter().map(|x| *x >= 0.5).collect();
            assert!((f1_binary(&p, &l).unwrap() - ref_f1(&p, &l)).abs() < 1e-12);
            checked += 1;
        }
    }

    proptest! {
        #[test]
        fn auroc_is_rank_invariant(
            s in prop::collection::vec(-5.0f64..5.0, 2..30),
            bits in prop::collection::vec(any::<bool>(), 30),
        ) {
            let l = &bits[..s.len()];
            prop_assume!(l.iter().any(|x| *x) && l.iter().any(|x| !*x));
            let t: Vec<f64> = s.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            prop_assert!((auroc(&s, l).unwrap() - auroc(&t, l).unwrap()).abs() < 1e-12);
            let a = auprc(&s, l).unwrap();
            prop_assert!(a > 0.0 && a <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn task_metric_shapes() {
        let p = [vec![0.1, 0.7, 0.2], vec![0.8, 0.1, 0.1], vec![0.2, 0.2, 0.6]];
        let pr: Vec<&Vec<f64>> = p.iter().collect();
        let los = [Label::Class(1), Label::Class(0), Label::Class(2)];
        let lr: Vec<&Label> = los.iter().collect();
        assert_eq!(task_metric(Task::LengthOfStay, Metric::Auroc, &pr, &lr).unwrap(), 1.0);
        assert_eq!(task_metric(Task::LengthOfStay, Metric::F1, &pr, &lr).unwrap(), 1.0);
        let mh = [Label::MultiHot(vec![0, 1, 0]), Label::MultiHot(vec![1, 0, 0]), Label::MultiHot(vec![0, 0, 1])];
        let mr: Vec<&Label> = mh.iter().collect();
        assert_eq!(task_metric(Task::Drug, Metric::Auprc, &pr, &mr).unwrap(), 1.0);
        assert_eq!(task_metric(Task::Drug, Metric::F1, &pr, &mr).unwrap(), 1.0);
        assert!(task_metric(Task::Mortality, Metric::Auroc, &pr, &mr).is_err());
    }

    #[test]
    fn bootstrap_properties() {
        let (m, s, v) = bootstrap(10, 50, 3, |_| Ok(0.42)).unwrap();
        assert_eq!((m, s), (0.42, 0.0));
        assert_eq!(v.len(), 50);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let probs: Vec<Vec<f64>> = (0..300).map(|_| vec![rng.random()]).collect();
        let labels: Vec<Label> = probs.iter().map(|p| Label::Binary(rng.random::<f64>() < p[0])).collect();
        let a = bootstrap_task(Task::Mortality, Metric::Auroc, &probs, &labels, 100, 7).unwrap();
        let b = bootstrap_task(Task::Mortality, Metric::Auroc, &probs, &labels, 100, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_resamples, 100);
        let (_, _, vals) = bootstrap(probs.len(), 100, 7, |idx| {
            let l: Vec<bool> = idx.iter().map(|i| matches!(labels[*i], Label::Binary(true))).collect();
            let s: Vec<f64> = idx.iter().map(|i| probs[*i][0]).collect();
            auroc(&s, &l)
        })
        .unwrap();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo <= a.mean && a.mean <= hi);
    }

    #[test]
    fn bootstrap_mean_tracks_point_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let probs: Vec<Vec<f64>> = (0..400).map(|_| vec![rng.random()]).collect();
        let labels: Vec<Label> = probs.iter().map(|p| Label::Binary(rng.random::<f64>() < p[0])).collect();
        let pr: Vec<&Vec<f64>> = probs.iter().collect();
        let lr: Vec<&Label> = labels.iter().collect();
        let point = task_metric(Task::Mortality, Metric::Auroc, &pr, &lr).unwrap();
        let n = 1000;
        let r = bootstrap_task(Task::Mortality, Metric::Auroc, &probs, &labels, n, 1).unwrap();
        assert!((r.mean - point).abs() < 3.0 * r.std / (n as f64).sqrt());
    }

    #[test]
    fn bootstrap_redraws_single_class_resamples() {
        // One positive among 20: many resamples miss it entirely.
        let probs: Vec<Vec<f64>> = (0..20).map(|i| vec![f64::from(i) / 20.0]).collect();
        let labels: Vec<Label> = (0..20).map(|i| Label::Binary(i == 19)).collect();
        let r = bootstrap_task(Task::Mortality, Metric::Auroc, &probs, &labels, 100, 0).unwrap();
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn jaccard_examples() {
        let s = |v: &[char]| v.iter().copied().collect::<BTreeSet<char>>();
        assert!((jaccard(&s(&['a', 'b']), &s(&['b', 'c'])) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&s(&['a']), &s(&['a'])), 1.0);
        assert_eq!(jaccard(&s(&['a']), &s(&['b'])), 0.0);
        assert_eq!(jaccard(&s(&[]), &s(&[])), 1.0);
    }

    fn blobs(seed: u64, centers: &[[f64; 2]], per: usize, sd: f64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, sd).unwrap();
        centers
            .iter()
            .flat_map(|c| (0..per).map(|_| vec![c[0] + n.sample(&mut rng), c[1] + n.sample(&mut rng)]).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn kmeans_separates_blobs() {
        // Mean within-blob pair distance is about 0.89, a tenth of the
        // center separation.
        let pts = blobs(5, &[[0.0, 0.0], [10.0, 0.0]], 50, 0.5);
        let r = kmeans(&pts, 2, 0).unwrap();
        assert!(r.silhouette >= 0.9, "{}", r.silhouette);
        assert!(r.assignments[..50].iter().all(|a| *a == r.assignments[0]));
        assert!(r.assignments[50..].iter().all(|a| *a != r.assignments[0]));
        assert_eq!(kmeans(&pts, 2, 0).unwrap(), r);
        assert_eq!(kmeans(&pts, 1, 0).unwrap().silhouette, 0.0);
        assert!(kmeans(&pts, 0, 0).is_err());
        assert!(kmeans(&pts[..1], 2, 0).is_err());
    }

    #[test]
    fn silhouette_conventions() {
        // Duplicates in one cluster: a_i = 0, so each scores 1.
        let pts = vec![vec![0.0], vec![0.0], vec![5.0], vec![5.0]];
        assert_eq!(silhouette(&pts, &[0, 0, 1, 1]).unwrap(), 1.0);
        // A singleton scores 0; the pair scores 1 each.
        let pts = vec![vec![0.0], vec![0.0], vec![5.0]];
        assert!((silhouette(&pts, &[0, 0, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(silhouette(&pts, &[0, 0, 0]).unwrap(), 0.0);
        // Identical points everywhere: a = b = 0.
        let pts = vec![vec![1.0]; 4];
        assert_eq!(kmeans(&pts, 2, 0).unwrap().silhouette, 0.0);
    }
}
