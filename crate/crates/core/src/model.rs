//! The full hierarchical prototype model: parameters, forward pass and
//! batched prediction with fusion traces.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ehr::{Label, Task, TaskSample};
use crate::encoders::{
    compgcn_forward, encode_patients, level_encode, pool_visits, Activation, EdgeIndex, GcnLayer, GcnOptions,
    PrototypeBank, TransformerLayer, TransformerParams,
};
use crate::fusion::{collect_traces, fuse, head_logits, predict, task_loss, FusionOutput, FusionParams, FusionTrace, Level, LevelAttention};
use crate::kg::MedicalKG;
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub gcn_layers: usize,
    pub transformer_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub code_protos: usize,
    pub visit_protos: usize,
    pub patient_protos: usize,
    pub dropout: f64,
    pub tau: f64,
    /// Rows of the positional table.
    pub max_visits: usize,
    pub gcn_mean_norm: bool,
    pub causal: bool,
    /// Standard deviation of embedding, positional and prototype init.
    pub init_std: f64,
    pub use_code_proto: bool,
    pub use_visit_proto: bool,
    pub use_patient_proto: bool,
    pub use_fusion: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            gcn_layers: 2,
            transformer_layers: 1,
            heads: 2,
            ffn_mult: 4,
            code_protos: 32,
            visit_protos: 8,
            patient_protos: 4,
            dropout: 0.1,
            tau: 1.0,
            max_visits: 64,
            gcn_mean_norm: false,
            causal: true,
            init_std: 1.0,
            use_code_proto: true,
            use_visit_proto: true,
            use_patient_proto: true,
            use_fusion: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return err("dim must be positive and divisible by heads");
        }
        if self.gcn_layers == 0 || self.transformer_layers == 0 || self.ffn_mult == 0 {
            return err("layer counts must be positive");
        }
        if self.code_protos == 0 || self.visit_protos == 0 || self.patient_protos == 0 {
            return err("every prototype bank needs at least one prototype");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err("dropout must lie in [0, 1)");
        }
        if !(self.tau > 0.0) || self.max_visits == 0 || !(self.init_std > 0.0) {
            return err("temperature, positional table size and init std must be positive");
        }
        if self.use_fusion && !(self.use_code_proto || self.use_visit_proto || self.use_patient_proto) {
            return err("fusion needs at least one prototype level");
        }
        Ok(())
    }

    fn level_enabled(&self, level: Level) -> bool {
        match level {
            Level::Code => self.use_code_proto,
            Level::Visit => self.use_visit_proto,
            Level::Patient => self.use_patient_proto,
        }
    }

    fn protos(&self, level: Level) -> usize {
        match level {
            Level::Code => self.code_protos,
            Level::Visit => self.visit_protos,
            Level::Patient => self.patient_protos,
        }
    }
}

/// Named parameter tensors in a fixed (sorted) order.
pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal,
    Xavier,
    Zeros,
    Ones,
}

/// Every parameter's name, shape and initializer.
fn layout(cfg: &ModelConfig, task: Task, n_entities: usize, n_relation_rows: usize) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.dim;
    let f = cfg.dim * cfg.ffn_mult;
    let mut out = vec![
        ("entity_emb".to_string(), vec![n_entities, d], Init::Normal),
        ("relation_emb".to_string(), vec![n_relation_rows, d], Init::Normal),
    ];
    for l in 0..cfg.gcn_layers {
        out.push((format!("gcn.{l}.w_ent"), vec![d, d], Init::Xavier));
        out.push((format!("gcn.{l}.w_rel"), vec![d, d], Init::Xavier));
    }
    for level in Level::ALL {
        if !cfg.level_enabled(level) {
            continue;
        }
        let p = format!("proto.{}", level.as_str());
        out.push((format!("{p}.h"), vec![cfg.protos(level), d], Init::Normal));
        for w in ["w_q", "w_k", "w_v", "w_i"] {
            out.push((format!("{p}.{w}"), vec![d, d], Init::Xavier));
        }
    }
    out.push(("pos_emb".to_string(), vec![cfg.max_visits, d], Init::Normal));
    for l in 0..cfg.transformer_layers {
        let p = format!("tf.{l}");
        for w in ["w_q", "w_k", "w_v", "w_o"] {
            out.push((format!("{p}.{w}"), vec![d, d], Init::Xavier));
        }
        out.push((format!("{p}.ln1_g"), vec![1, d], Init::Ones));
        out.push((format!("{p}.ln1_b"), vec![1, d], Init::Zeros));
        out.push((format!("{p}.ffn_w1"), vec![d, f], Init::Xavier));
        out.push((format!("{p}.ffn_b1"), vec![1, f], Init::Zeros));
        out.push((format!("{p}.ffn_w2"), vec![f, d], Init::Xavier));
        out.push((format!("{p}.ffn_b2"), vec![1, d], Init::Zeros));
        out.push((format!("{p}.ln2_g"), vec![1, d], Init::Ones));
        out.push((format!("{p}.ln2_b"), vec![1, d], Init::Zeros));
    }
    if cfg.use_fusion {
        for level in Level::ALL.into_iter().filter(|l| cfg.level_enabled(*l)) {
            for w in ["w_q", "w_k", "w_v"] {
                out.push((format!("fusion.{}.{w}", level.as_str()), vec![d, d], Init::Xavier));
            }
        }
        out.push(("fusion.w_f".to_string(), vec![d, 1], Init::Xavier));
    }
    out.push(("head.w".to_string(), vec![d, task.output_dim()], Init::Xavier));
    out.push(("head.b".to_string(), vec![1, task.output_dim()], Init::Zeros));
    out
}

fn init_tensor(shape: &[usize], init: Init, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal => {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| dist.sample(rng)).collect()
        }
        Init::Xavier => {
            let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-a..a)).collect()
        }
    };
    Tensor::new(shape.to_vec(), data).expect("sized")
}

/// Graph handles of the parameters bound for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bound(BTreeMap<String, Var>);

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        self.0[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.0.iter()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    pub fusion: Option<FusionOutput>,
    pub bound: Bound,
}

#[derive(Debug, Clone)]
pub struct ProtoEhr {
    pub cfg: ModelConfig,
    pub task: Task,
    pub params: ParamMap,
    edges: EdgeIndex,
}

impl ProtoEhr {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(cfg: ModelConfig, task: Task, kg: &MedicalKG, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let edges = EdgeIndex::from_kg(kg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamMap::new();
        for (name, shape, init) in layout(&cfg, task, edges.n_entities, edges.n_relation_rows) {
            let mut t = init_tensor(&shape, init, cfg.init_std, &mut rng);
            if name == "entity_emb" {
                t.data_mut()[..cfg.dim].fill(0.0);
            }
            params.insert(name, t);
        }
        Ok(Self { cfg, task, params, edges })
    }

    /// Model around existing parameters, checked against the expected layout.
    pub fn from_params(cfg: ModelConfig, task: Task, kg: &MedicalKG, params: ParamMap) -> Result<Self> {
        cfg.validate()?;
        let edges = EdgeIndex::from_kg(kg);
        let want = layout(&cfg, task, edges.n_entities, edges.n_relation_rows);
        if want.len() != params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, found {}",
                want.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &want {
            let found = params
                .get(name)
                .ok_or_else(|| ModelError::Config(format!("missing parameter {name}")))?;
            if found.shape() != shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: found.shape().to_vec(),
                });
            }
        }
        Ok(Self { cfg, task, params, edges })
    }

    pub fn edges(&self) -> &EdgeIndex {
        &self.edges
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.params.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect())
    }

    fn bank(b: &Bound, level: Level) -> PrototypeBank {
        let p = format!("proto.{}", level.as_str());
        PrototypeBank {
            h: b.get(&format!("{p}.h")),
            w_q: b.get(&format!("{p}.w_q")),
            w_k: b.get(&format!("{p}.w_k")),
            w_v: b.get(&format!("{p}.w_v")),
            w_i: b.get(&format!("{p}.w_i")),
        }
    }

    /// Applies a level's prototype encoder (or passes through when that
    /// level is ablated) followed by dropout.
    fn level(&self, g: &mut Graph, b: &Bound, level: Level, x: Var, seed: u64, banks: &mut Vec<(Level, Var)>) -> Result<Var> {
        if !self.cfg.level_enabled(level) {
            return Ok(x);
        }
        let out = level_encode(g, x, &Self::bank(b, level))?;
        banks.push((level, out.prototypes));
        Ok(g.dropout(out.infused, self.cfg.dropout, seed)?)
    }

    /// Forward pass over a batch. Dropout is active only on a training graph
    /// and its masks are keyed by `seed`.
    pub fn forward(&self, g: &mut Graph, batch: &[&TaskSample], seed: u64) -> Result<ForwardOutput> {
        if batch.is_empty() {
            return Err(ModelError::Config("empty batch".into()));
        }
        let n_codes = self.edges.n_entities - 1;
        let mut visits: Vec<Vec<usize>> = Vec::new();
        let mut lens = Vec::with_capacity(batch.len());
        for s in batch {
            if s.input_visits.is_empty() {
                return Err(ModelError::Config(format!("sample of patient {} has no input visits", s.patient_id)));
            }
            if s.input_visits.len() > self.cfg.max_visits {
                return Err(ModelError::Config(format!(
                    "{} visits exceed the positional table of {}",
                    s.input_visits.len(),
                    self.cfg.max_visits
                )));
            }
            lens.push(s.input_visits.len());
            for v in &s.input_visits {
                if let Some(c) = v.iter().find(|c| **c == 0 || **c as usize > n_codes) {
                    return Err(ModelError::Config(format!("code id {c} outside the vocabulary")));
                }
                visits.push(v.iter().map(|c| *c as usize - 1).collect());
            }
        }

        let b = self.bind(g);
        let cfg = &self.cfg;
        let seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let layers: Vec<GcnLayer> = (0..cfg.gcn_layers)
            .map(|l| GcnLayer {
                w_ent: b.get(&format!("gcn.{l}.w_ent")),
                w_rel: b.get(&format!("gcn.{l}.w_rel")),
            })
            .collect();
        let opts = GcnOptions {
            activation: Activation::Tanh,
            mean_norm: cfg.gcn_mean_norm,
        };
        let (ent, _) = compgcn_forward(g, &self.edges, b.get("entity_emb"), b.get("relation_emb"), &layers, opts)?;
        let codes = g.narrow(ent, 0, 1, n_codes)?;

        let mut banks = Vec::with_capacity(3);
        let codes = self.level(g, &b, Level::Code, codes, seed.wrapping_add(1), &mut banks)?;
        let v = pool_visits(g, codes, &visits)?;
        let v = self.level(g, &b, Level::Visit, v, seed.wrapping_add(2), &mut banks)?;

        let tf = TransformerParams {
            pos_emb: b.get("pos_emb"),
            layers: (0..cfg.transformer_layers)
                .map(|l| {
                    let n = |w: &str| b.get(&format!("tf.{l}.{w}"));
                    TransformerLayer {
                        w_q: n("w_q"),
                        w_k: n("w_k"),
                        w_v: n("w_v"),
                        w_o: n("w_o"),
                        ln1_g: n("ln1_g"),
                        ln1_b: n("ln1_b"),
                        ffn_w1: n("ffn_w1"),
                        ffn_b1: n("ffn_b1"),
                        ffn_w2: n("ffn_w2"),
                        ffn_b2: n("ffn_b2"),
                        ln2_g: n("ln2_g"),
                        ln2_b: n("ln2_b"),
                    }
                })
                .collect(),
            heads: cfg.heads,
            causal: cfg.causal,
            dropout: cfg.dropout,
            ln_eps: 1e-5,
        };
        let p = encode_patients(g, v, &lens, &tf, seed.wrapping_add(3))?;
        let p = self.level(g, &b, Level::Patient, p, seed.wrapping_add(4), &mut banks)?;

        let (final_rep, fusion) = if cfg.use_fusion {
            let params = FusionParams {
                levels: banks
                    .iter()
                    .map(|(l, _)| {
                        let n = |w: &str| b.get(&format!("fusion.{}.{w}", l.as_str()));
                        (
                            *l,
                            LevelAttention {
                                w_q: n("w_q"),
                                w_k: n("w_k"),
                                w_v: n("w_v"),
                            },
                        )
                    })
                    .collect(),
                w_f: b.get("fusion.w_f"),
                tau: cfg.tau,
            };
            let out = fuse(g, p, &banks, &params)?;
            (out.fused, Some(out))
        } else {
            (p, None)
        };
        let logits = head_logits(g, final_rep, b.get("head.w"), b.get("head.b"))?;
        Ok(ForwardOutput { logits, fusion, bound: b })
    }

    /// Loss and gradients of one training batch. The padding row of the
    /// entity table receives no update.
    pub fn loss_and_grads(&self, batch: &[&TaskSample], seed: u64, pos_weight: f64) -> Result<(f64, ParamMap)> {
        let mut g = Graph::training();
        let out = self.forward(&mut g, batch, seed)?;
        let labels: Vec<&Label> = batch.iter().map(|s| &s.label).collect();
        let loss = task_loss(&mut g, out.logits, &labels, self.task, pos_weight)?;
        let value = g.value(loss).item();
        g.backward(loss)?;
        let mut grads = ParamMap::new();
        for (name, v) in out.bound.iter() {
            let mut gr = g.grad(*v).unwrap_or_else(|| Tensor::zeros(g.shape(*v)));
            if name == "entity_emb" {
                gr.data_mut()[..self.cfg.dim].fill(0.0);
            }
            grads.insert(name.clone(), gr);
        }
        Ok((value, grads))
    }

    /// Evaluation-mode probabilities and fusion traces. `batch_size == 0`
    /// runs the whole slice as a single batch.
    pub fn predict(&self, samples: &[TaskSample], batch_size: usize) -> Result<(Vec<Vec<f64>>, Vec<FusionTrace>)> {
        let bs = if batch_size == 0 { samples.len().max(1) } else { batch_size };
        let mut probs = Vec::with_capacity(samples.len());
        let mut traces = Vec::new();
        for (ci, chunk) in samples.chunks(bs).enumerate() {
            let refs: Vec<&TaskSample> = chunk.iter().collect();
            let mut g = Graph::new();
            let out = self.forward(&mut g, &refs, 0)?;
            probs.extend(predict(g.value(out.logits), self.task));
            if let Some(f) = &out.fusion {
                let ids: Vec<u64> = chunk.iter().map(|s| s.patient_id).collect();
                let mut t = collect_traces(&g, f, &ids, ci * bs);
                for (t, s) in t.iter_mut().zip(chunk) {
                    t.label = Some(s.label.key());
                }
                traces.extend(t);
            }
        }
        Ok((probs, traces))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{CodeKind, CodeTable, MedicalCode};

    pub(crate) fn toy() -> (MedicalKG, Vec<TaskSample>) {
        let codes = CodeTable::new(
            (0..6)
                .map(|i| MedicalCode {
                    id: i + 1,
                    name: format!("c{i}"),
                    kind: [CodeKind::Diagnosis, CodeKind::Procedure, CodeKind::Medication][i as usize % 3],
                })
                .collect(),
        )
        .unwrap();
        let kg = MedicalKG::from_named(codes, &[("c0", "r", "c2"), ("c1", "s", "c3"), ("c4", "r", "c5")]).unwrap();
        let samples = vec![
            TaskSample {
                patient_id: 1,
                prefix_len: 3,
                input_visits: vec![vec![1, 3], vec![2, 5, 6]],
                task: Task::Mortality,
                label: Label::Binary(true),
            },
            TaskSample {
                patient_id: 2,
                prefix_len: 3,
                input_visits: vec![vec![4], vec![1, 6]],
                task: Task::Mortality,
                label: Label::Binary(false),
            },
        ];
        (kg, samples)
    }

    fn small() -> ModelConfig {
        ModelConfig {
            dim: 8,
            code_protos: 2,
            visit_protos: 2,
            patient_protos: 2,
            max_visits: 4,
            ..Default::default()
        }
    }

    #[test]
    fn layout_and_round_trip() {
        let (kg, samples) = toy();
        let m = ProtoEhr::new(small(), Task::Mortality, &kg, 1).unwrap();
        assert_eq!(m.params["relation_emb"].shape(), &[5, 8]);
        assert!(m.params["entity_emb"].row(0).iter().all(|v| *v == 0.0));
        let again = ProtoEhr::from_params(small(), Task::Mortality, &kg, m.params.clone()).unwrap();
        let (p1, t1) = m.predict(&samples, 0).unwrap();
        let (p2, _) = again.predict(&samples, 0).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(t1.len(), 2);
        for t in &t1 {
            assert!((t.beta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(t.proto_attn.visit.len(), 2);
        }
        let mut bad = m.params.clone();
        bad.insert("head.w".into(), Tensor::zeros(&[8, 2]));
        assert!(ProtoEhr::from_params(small(), Task::Mortality, &kg, bad).is_err());
    }

    #[test]
    fn ablations_change_layout() {
        let (kg, samples) = toy();
        let cfg = ModelConfig {
            use_visit_proto: false,
            ..small()
        };
        let m = ProtoEhr::new(cfg, Task::Mortality, &kg, 1).unwrap();
        assert!(!m.params.contains_key("proto.visit.h"));
        assert!(!m.params.contains_key("fusion.visit.w_q"));
        let (_, traces) = m.predict(&samples, 0).unwrap();
        assert_eq!(traces[0].beta[1], 0.0);
        assert!(traces[0].proto_attn.visit.is_empty());

        let cfg = ModelConfig {
            use_fusion: false,
            ..small()
        };
        let m = ProtoEhr::new(cfg, Task::LengthOfStay, &MedicalKG::empty(kg.codes().clone()), 1).unwrap();
        let los: Vec<TaskSample> = samples
            .into_iter()
            .map(|s| TaskSample {
                task: Task::LengthOfStay,
                label: Label::Class(3),
                ..s
            })
            .collect();
        let (p, traces) = m.predict(&los, 0).unwrap();
        assert!(traces.is_empty());
        assert_eq!(p[0].len(), 10);
        assert!((p[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn padding_row_gets_no_gradient() {
        let (kg, samples) = toy();
        let m = ProtoEhr::new(small(), Task::Mortality, &kg, 3).unwrap();
        let refs: Vec<&TaskSample> = samples.iter().collect();
        let (loss, grads) = m.loss_and_grads(&refs, 0, 1.0).unwrap();
        assert!(loss.is_finite());
        assert!(grads["entity_emb"].row(0).iter().all(|v| *v == 0.0));
        assert!(grads["proto.code.h"].norm() > 0.0);
    }

    #[test]
    fn rejects_out_of_vocabulary_codes() {
        let (kg, mut samples) = toy();
        samples[0].input_visits[0].push(99);
        let m = ProtoEhr::new(small(), Task::Mortality, &kg, 3).unwrap();
        assert!(m.predict(&samples, 0).is_err());
    }
}
