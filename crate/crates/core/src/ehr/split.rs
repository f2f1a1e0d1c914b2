use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EhrError, Result, TaskSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|x| !x.is_finite() || *x < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(EhrError::Config(format!(
                "split ratios must be nonnegative and sum to 1, got {r:?}"
            )));
        }
        Ok(())
    }

    /// Fold sizes by largest remainder, so each differs from its exact
    /// share by less than one.
    fn fold_sizes(&self, n: usize) -> [usize; 3] {
        let ratios = [self.train, self.val, self.test];
        let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
        let mut sizes = [0usize; 3];
        for i in 0..3 {
            sizes[i] = exact[i].floor() as usize;
        }
        let mut rest = n - sizes.iter().sum::<usize>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|a, b| {
            let fa = exact[*a] - exact[*a].floor();
            let fb = exact[*b] - exact[*b].floor();
            fb.total_cmp(&fa).then(a.cmp(b))
        });
        for i in order {
            if rest == 0 {
                break;
            }
            sizes[i] += 1;
            rest -= 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<TaskSample>,
    pub val: Vec<TaskSample>,
    pub test: Vec<TaskSample>,
}

/// Patient-level split: all samples of one patient land in the same fold.
pub fn split(samples: &[TaskSample], spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    let mut ids: Vec<u64> = samples.iter().map(|s| s.patient_id).collect::<BTreeSet<_>>().into_iter().collect();
    let sizes = spec.fold_sizes(ids.len());
    let ratios = [spec.train, spec.val, spec.test];
    if sizes.iter().zip(ratios).any(|(s, r)| r > 0.0 && *s == 0) {
        return Err(EhrError::Config(format!(
            "{} patients cannot fill folds with ratios {ratios:?}",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    ids.shuffle(&mut rng);
    let fold: HashMap<u64, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let f = if i < sizes[0] {
                0
            } else if i < sizes[0] + sizes[1] {
                1
            } else {
                2
            };
            (*id, f)
        })
        .collect();
    let mut out = Splits::default();
    for s in samples {
        match fold[&s.patient_id] {
            0 => out.train.push(s.clone()),
            1 => out.val.push(s.clone()),
            _ => out.test.push(s.clone()),
        }
    }
    Ok(out)
}
