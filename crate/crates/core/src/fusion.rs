//! Hierarchical fusion of the patient representation with the prototypes
//! of every level, the linear task head and the task losses.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::ehr::{Label, Task};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Code,
    Visit,
    Patient,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Code, Level::Visit, Level::Patient];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Code => "code",
            Level::Visit => "visit",
            Level::Patient => "patient",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LevelAttention {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// Per-level query/key/value maps plus the scoring vector `w_F` (`d × 1`).
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub levels: Vec<(Level, LevelAttention)>,
    pub w_f: Var,
    pub tau: f64,
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub fused: Var,
    /// `B × T` level weights, columns ordered like the input levels.
    pub beta: Var,
    /// `B × m_t` attention over each level's prototypes.
    pub attention: Vec<(Level, Var)>,
}

/// Attends from each patient to every level's prototypes and mixes the
/// per-level summaries with softmax weights over levels.
pub fn fuse(g: &mut Graph, p: Var, prototypes: &[(Level, Var)], params: &FusionParams) -> Result<FusionOutput> {
    if prototypes.is_empty() {
        return Err(TensorError::Contract("fusion needs at least one prototype bank".into()));
    }
    if params.tau <= 0.0 {
        return Err(TensorError::Contract(format!("temperature must be positive, got {}", params.tau)));
    }
    let d = g.shape(p)[1];
    let scale = 1.0 / (d as f64).sqrt();
    let mut summaries = Vec::with_capacity(prototypes.len());
    let mut scores = Vec::with_capacity(prototypes.len());
    let mut attention = Vec::with_capacity(prototypes.len());
    for (level, h) in prototypes {
        let w = params
            .levels
            .iter()
            .find(|(l, _)| l == level)
            .map(|(_, w)| *w)
            .ok_or_else(|| TensorError::Contract(format!("no fusion weights for level {}", level.as_str())))?;
        let q = g.matmul(p, w.w_q)?;
        let k = g.matmul(*h, w.w_k)?;
        let v = g.matmul(*h, w.w_v)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, scale);
        let a = g.softmax(s, 1)?;
        let pt = g.matmul(a, v)?;
        scores.push(g.matmul(pt, params.w_f)?);
        summaries.push(pt);
        attention.push((*level, a));
    }
    let s = if scores.len() == 1 { scores[0] } else { g.concat(&scores, 1)? };
    let s = g.scale(s, 1.0 / params.tau);
    let beta = g.softmax(s, 1)?;
    let mut fused = None;
    for (t, pt) in summaries.into_iter().enumerate() {
        let bt = g.narrow(beta, 1, t, 1)?;
        let bt = g.repeat_cols(bt, d)?;
        let term = g.mul(pt, bt)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok(FusionOutput {
        fused: fused.expect("at least one level"),
        beta,
        attention,
    })
}

/// `x · W + b` with `W: d × out` and `b: 1 × out`.
pub fn head_logits(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    let y = g.matmul(x, w)?;
    let br = g.repeat_rows(b, n)?;
    g.add(y, br)
}

/// Probabilities from logits: softmax rows for length of stay, elementwise
/// sigmoid otherwise.
pub fn predict(logits: &Tensor, task: Task) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|i| {
            let r = logits.row(i);
            if task == Task::LengthOfStay {
                let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|v| v / s).collect()
            } else {
                r.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect()
            }
        })
        .collect()
}

/// Mean binary cross-entropy, or categorical cross-entropy for length of
/// stay.
pub fn task_loss(g: &mut Graph, logits: Var, labels: &[&Label], task: Task, pos_weight: f64) -> Result<Var> {
    let (b, c) = (g.shape(logits)[0], g.shape(logits)[1]);
    if b != labels.len() || c != task.output_dim() {
        return Err(TensorError::Shape {
            op: "task_loss",
            lhs: vec![b, c],
            rhs: vec![labels.len(), task.output_dim()],
        });
    }
    if task == Task::LengthOfStay {
        let ys: Vec<usize> = labels
            .iter()
            .map(|l| match l {
                Label::Class(k) if *k < c => Ok(*k),
                other => Err(TensorError::Contract(format!("expected a class label, got {other:?}"))),
            })
            .collect::<Result<_>>()?;
        return g.cross_entropy(logits, &ys);
    }
    let mut ys = Vec::with_capacity(b * c);
    for l in labels {
        let t = l
            .targets()
            .filter(|t| t.len() == c)
            .ok_or_else(|| TensorError::Contract(format!("label {l:?} does not fit {c} outputs")))?;
        ys.extend(t);
    }
    g.bce_with_logits(logits, &ys, pos_weight)
}

/// Fusion weights and prototype attention of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionTrace {
    pub sample: usize,
    pub patient_id: u64,
    /// Level weights in code, visit, patient order; dropped levels are 0.
    pub beta: [f64; 3],
    pub proto_attn: ProtoAttention,
    /// Row key of the sample's label, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProtoAttention {
    pub code: Vec<f64>,
    pub visit: Vec<f64>,
    pub patient: Vec<f64>,
}

impl ProtoAttention {
    pub fn get(&self, level: Level) -> &[f64] {
        match level {
            Level::Code => &self.code,
            Level::Visit => &self.visit,
            Level::Patient => &self.patient,
        }
    }

    pub fn get_mut(&mut self, level: Level) -> &mut Vec<f64> {
        match level {
            Level::Code => &mut self.code,
            Level::Visit => &mut self.visit,
            Level::Patient => &mut self.patient,
        }
    }
}

/// Per-sample traces from a fusion pass.
pub fn collect_traces(g: &Graph, out: &FusionOutput, patient_ids: &[u64], first_sample: usize) -> Vec<FusionTrace> {
    let beta = g.value(out.beta);
    (0..beta.rows())
        .map(|i| {
            let mut b = [0.0; 3];
            let mut pa = ProtoAttention::default();
            for (t, (level, a)) in out.attention.iter().enumerate() {
                b[*level as usize] = beta.at(i, t);
                *pa.get_mut(*level) = g.value(*a).row(i).to_vec();
            }
            FusionTrace {
                sample: first_sample + i,
                patient_id: patient_ids[i],
                beta: b,
                proto_attn: pa,
                label: None,
            }
        })
        .collect()
}

pub fn write_traces(traces: &[FusionTrace], mut w: impl Write) -> std::io::Result<()> {
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_traces(r: impl std::io::BufRead) -> std::io::Result<Vec<FusionTrace>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn params(g: &mut Graph, rng: &mut ChaCha8Rng, d: usize, tau: f64) -> FusionParams {
        let levels = Level::ALL
            .iter()
            .map(|l| {
                (
                    *l,
                    LevelAttention {
                        w_q: g.param(rand_t(rng, d, d)),
                        w_k: g.param(rand_t(rng, d, d)),
                        w_v: g.param(rand_t(rng, d, d)),
                    },
                )
            })
            .collect();
        FusionParams {
            levels,
            w_f: g.param(rand_t(rng, d, 1)),
            tau,
        }
    }

    fn softmax(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    }

    fn vm(x: &[f64], w: &Tensor) -> Vec<f64> {
        (0..w.cols()).map(|j| x.iter().enumerate().map(|(i, v)| v * w.at(i, j)).sum()).collect()
    }

    #[test]
    fn matches_explicit_loop_oracle() {
        let (d, m, b) = (4, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let fp = params(&mut g, &mut rng, d, 0.7);
        let ps = rand_t(&mut rng, b, d);
        let hs: Vec<Tensor> = (0..3).map(|_| rand_t(&mut rng, m, d)).collect();
        let p = g.constant(ps.clone());
        let banks: Vec<(Level, Var)> = Level::ALL.iter().zip(&hs).map(|(l, h)| (*l, g.constant(h.clone()))).collect();
        let out = fuse(&mut g, p, &banks, &fp).unwrap();

        let wf = g.value(fp.w_f).clone();
        for i in 0..b {
            let mut pts = Vec::new();
            for (t, (_, w)) in fp.levels.iter().enumerate() {
                let q = vm(ps.row(i), g.value(w.w_q));
                let s: Vec<f64> = (0..m)
                    .map(|j| q.iter().zip(vm(hs[t].row(j), g.value(w.w_k))).map(|(a, b)| a * b).sum::<f64>() / 2.0)
                    .collect();
                let a = softmax(&s);
                let mut pt = vec![0.0; d];
                for j in 0..m {
                    for (o, v) in pt.iter_mut().zip(vm(hs[t].row(j), g.value(w.w_v))) {
                        *o += a[j] * v;
                    }
                }
                pts.push(pt);
            }
            let beta = softmax(&pts.iter().map(|pt| vm(pt, &wf)[0] / 0.7).collect::<Vec<_>>());
            for c in 0..d {
                let want: f64 = (0..3).map(|t| beta[t] * pts[t][c]).sum();
                assert!((g.value(out.fused).at(i, c) - want).abs() < 1e-10);
            }
            for t in 0..3 {
                assert!((g.value(out.beta).at(i, t) - beta[t]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn symmetric_levels_and_temperature_limit() {
        let d = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let mut fp = params(&mut g, &mut rng, d, 1.0);
        let shared = fp.levels[0].1;
        for l in &mut fp.levels {
            l.1 = shared;
        }
        let h = g.constant(rand_t(&mut rng, 3, d));
        let p = g.constant(rand_t(&mut rng, 5, d));
        let banks: Vec<(Level, Var)> = Level::ALL.iter().map(|l| (*l, h)).collect();
        let out = fuse(&mut g, p, &banks, &fp).unwrap();
        assert!(g.value(out.beta).data().iter().all(|b| (b - 1.0 / 3.0).abs() < 1e-12));

        let fp2 = params(&mut g, &mut rng, d, 1e9);
        let banks: Vec<(Level, Var)> = (0..3).map(|i| (Level::ALL[i], g.constant(rand_t(&mut rng, 2 + i, d)))).collect();
        let out = fuse(&mut g, p, &banks, &fp2).unwrap();
        assert!(g.value(out.beta).data().iter().all(|b| (b - 1.0 / 3.0).abs() < 1e-6));
    }

    #[test]
    fn head_and_prediction() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3], 0.3));
        for task in Task::ALL {
            let w = g.param(Tensor::zeros(&[3, task.output_dim()]));
            let b = g.param(Tensor::zeros(&[1, task.output_dim()]));
            let z = head_logits(&mut g, x, w, b).unwrap();
            let p = predict(g.value(z), task);
            assert_eq!(p[0].len(), task.output_dim());
            if task == Task::LengthOfStay {
                assert!((p[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            } else {
                assert!(p[0].iter().all(|v| *v == 0.5));
            }
        }
    }

    #[test]
    fn loss_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 1]));
        let y = [Label::Binary(true), Label::Binary(false)];
        let refs: Vec<&Label> = y.iter().collect();
        let l = task_loss(&mut g, z, &refs, Task::Mortality, 1.0).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);

        let z = g.constant(Tensor::from_rows(&[vec![40.0], vec![-40.0]]).unwrap());
        let l = task_loss(&mut g, z, &refs, Task::Mortality, 1.0).unwrap();
        assert!(g.value(l).item() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zs = rand_t(&mut rng, 3, 26);
        let labels: Vec<Label> = (0..3).map(|_| Label::MultiHot((0..26).map(|_| rng.random_range(0..2u8)).collect())).collect();
        let z = g.constant(zs.clone());
        let refs: Vec<&Label> = labels.iter().collect();
        let l = task_loss(&mut g, z, &refs, Task::Phenotype, 1.0).unwrap();
        let mut want = 0.0;
        for (i, lab) in labels.iter().enumerate() {
            for (j, y) in lab.targets().unwrap().iter().enumerate() {
                let p = 1.0 / (1.0 + (-zs.at(i, j)).exp());
                want -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            }
        }
        assert!((g.value(l).item() - want / 78.0).abs() < 1e-12);

        let bad = [Label::Class(3)];
        let z = g.constant(Tensor::zeros(&[1, 1]));
        assert!(task_loss(&mut g, z, &[&bad[0]], Task::Mortality, 1.0).is_err());
    }

    #[test]
    fn trace_round_trip() {
        let t = FusionTrace {
            sample: 3,
            patient_id: 9,
            beta: [0.2, 0.3, 0.5],
            proto_attn: ProtoAttention {
                code: vec![0.5, 0.5],
                visit: vec![1.0],
                patient: vec![0.25; 4],
            },
            label: Some(1),
        };
        let mut buf = Vec::new();
        write_traces(&[t.clone()], &mut buf).unwrap();
        let s = String::from_utf8(buf.clone()).unwrap();
        assert!(s.contains("\"proto_attn\":{\"code\""));
        assert_eq!(read_traces(buf.as_slice()).unwrap(), vec![t]);
    }
}
