//! Code, visit and patient encoders plus the prototype learn/infuse pair
//! shared by all three levels.
//!
//! All matrices follow the row-vector convention: objects are rows and a
//! linear map is applied as `X · W`.

use crate::kg::MedicalKG;
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

/// Mask value standing in for `-inf` in attention scores.
pub const MASKED: f64 = -1e9;

/// Edge list of the finalized graph plus one self-loop per real code.
///
/// Relation rows are laid out as forward relations, inverse relations, then
/// the self-loop relation at index `2R`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeIndex {
    pub src: Vec<usize>,
    pub rel: Vec<usize>,
    pub dst: Vec<usize>,
    pub n_entities: usize,
    pub n_relation_rows: usize,
    /// In-degree of every entity, self-loop included.
    pub degree: Vec<usize>,
}

impl EdgeIndex {
    pub fn from_kg(kg: &MedicalKG) -> Self {
        let n = kg.codes().len();
        let r = kg.num_relations();
        let self_rel = 2 * r;
        let mut out = Self {
            src: Vec::new(),
            rel: Vec::new(),
            dst: Vec::new(),
            n_entities: n,
            n_relation_rows: 2 * r + 1,
            degree: vec![0; n],
        };
        for t in kg.finalized() {
            out.push(t.head as usize, t.relation as usize, t.tail as usize);
        }
        for c in 1..n {
            out.push(c, self_rel, c);
        }
        out
    }

    fn push(&mut self, s: usize, r: usize, d: usize) {
        self.src.push(s);
        self.rel.push(r);
        self.dst.push(d);
        self.degree[d] += 1;
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GcnOptions {
    pub activation: Activation,
    /// Divide each aggregated message sum by the in-degree.
    pub mean_norm: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct GcnLayer {
    pub w_ent: Var,
    pub w_rel: Var,
}

/// Runs the relational convolution stack and returns the final entity and
/// relation representations.
pub fn compgcn_forward(
    g: &mut Graph,
    edges: &EdgeIndex,
    entities: Var,
    relations: Var,
    layers: &[GcnLayer],
    opts: GcnOptions,
) -> Result<(Var, Var)> {
    if layers.is_empty() {
        return Err(TensorError::Contract("compgcn needs at least one layer".into()));
    }
    let (n, r) = (g.shape(entities)[0], g.shape(relations)[0]);
    if n != edges.n_entities || r != edges.n_relation_rows {
        return Err(TensorError::Shape {
            op: "compgcn_forward",
            lhs: vec![n, r],
            rhs: vec![edges.n_entities, edges.n_relation_rows],
        });
    }
    let d = g.shape(entities)[1];
    let norm = if opts.mean_norm {
        let data = edges
            .degree
            .iter()
            .flat_map(|k| std::iter::repeat_n(if *k == 0 { 0.0 } else { 1.0 / *k as f64 }, d))
            .collect();
        Some(g.constant(Tensor::new(vec![n, d], data)?))
    } else {
        None
    };
    let (mut ent, mut rel) = (entities, relations);
    for layer in layers {
        let hs = g.gather_rows(ent, &edges.src)?;
        let rs = g.gather_rows(rel, &edges.rel)?;
        let msg = g.circular_correlation(hs, rs)?;
        let mut agg = g.scatter_add_rows(msg, &edges.dst, n)?;
        if let Some(w) = norm {
            agg = g.mul(agg, w)?;
        }
        let lin = g.matmul(agg, layer.w_ent)?;
        ent = match opts.activation {
            Activation::Tanh => g.tanh(lin),
            Activation::Identity => lin,
        };
        rel = g.matmul(rel, layer.w_rel)?;
    }
    Ok((ent, rel))
}

/// Mean of the listed code rows for each visit.
pub fn pool_visits(g: &mut Graph, codes: Var, visits: &[Vec<usize>]) -> Result<Var> {
    if let Some(i) = visits.iter().position(Vec::is_empty) {
        return Err(TensorError::Contract(format!("visit {i} has no codes")));
    }
    g.segment_mean(codes, visits)
}

#[derive(Debug, Clone, Copy)]
pub struct TransformerLayer {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
}

#[derive(Debug, Clone)]
pub struct TransformerParams {
    pub pos_emb: Var,
    pub layers: Vec<TransformerLayer>,
    pub heads: usize,
    pub causal: bool,
    pub dropout: f64,
    pub ln_eps: f64,
}

fn affine(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    let gr = g.repeat_rows(gain, n)?;
    let br = g.repeat_rows(bias, n)?;
    let y = g.mul(x, gr)?;
    g.add(y, br)
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let n = g.shape(x)[0];
    let y = g.matmul(x, w)?;
    let br = g.repeat_rows(b, n)?;
    g.add(y, br)
}

/// Additive attention mask for sequences laid out back to back.
pub fn block_mask(lens: &[usize], causal: bool) -> Tensor {
    let total: usize = lens.iter().sum();
    let mut m = Tensor::full(&[total, total], MASKED);
    let mut start = 0;
    for &l in lens {
        for i in 0..l {
            let hi = if causal { i + 1 } else { l };
            for j in 0..hi {
                m.data_mut()[(start + i) * total + start + j] = 0.0;
            }
        }
        start += l;
    }
    m
}

/// Multi-head self-attention over all rows of `x` with an additive mask.
pub fn self_attention(g: &mut Graph, x: Var, layer: &TransformerLayer, heads: usize, mask: Var) -> Result<Var> {
    let d = g.shape(x)[1];
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::Contract(format!("model dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let q = g.matmul(x, layer.w_q)?;
    let k = g.matmul(x, layer.w_k)?;
    let v = g.matmul(x, layer.w_v)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.narrow(q, 1, h * dh, dh)?;
        let kh = g.narrow(k, 1, h * dh, dh)?;
        let vh = g.narrow(v, 1, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, 1.0 / (dh as f64).sqrt());
        let s = g.add(s, mask)?;
        let a = g.softmax(s, 1)?;
        outs.push(g.matmul(a, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    g.matmul(cat, layer.w_o)
}

/// Encodes each patient's visit sequence and returns the representation at
/// its last position. `visits` holds the sequences back to back with
/// lengths `lens`. `seed` keys the dropout masks.
pub fn encode_patients(g: &mut Graph, visits: Var, lens: &[usize], tf: &TransformerParams, seed: u64) -> Result<Var> {
    let total: usize = lens.iter().sum();
    if lens.contains(&0) || total != g.shape(visits)[0] {
        return Err(TensorError::Contract("every patient needs at least one visit".into()));
    }
    let max_pos = g.shape(tf.pos_emb)[0];
    let longest = lens.iter().copied().max().unwrap_or(0);
    if longest > max_pos {
        return Err(TensorError::Contract(format!(
            "sequence of {longest} visits exceeds the {max_pos} positional rows"
        )));
    }
    let positions: Vec<usize> = lens.iter().flat_map(|l| 0..*l).collect();
    let pos = g.gather_rows(tf.pos_emb, &positions)?;
    let mut x = g.add(visits, pos)?;
    let mask = g.constant(block_mask(lens, tf.causal));
    for (li, layer) in tf.layers.iter().enumerate() {
        let s = seed.wrapping_mul(31).wrapping_add(2 * li as u64);
        let att = self_attention(g, x, layer, tf.heads, mask)?;
        let att = g.dropout(att, tf.dropout, s)?;
        let y = g.add(x, att)?;
        let y = g.layer_norm(y, tf.ln_eps)?;
        x = affine(g, y, layer.ln1_g, layer.ln1_b)?;
        let h = linear(g, x, layer.ffn_w1, layer.ffn_b1)?;
        let h = g.relu(h);
        let f = linear(g, h, layer.ffn_w2, layer.ffn_b2)?;
        let f = g.dropout(f, tf.dropout, s + 1)?;
        let y = g.add(x, f)?;
        let y = g.layer_norm(y, tf.ln_eps)?;
        x = affine(g, y, layer.ln2_g, layer.ln2_b)?;
    }
    let mut last = Vec::with_capacity(lens.len());
    let mut end = 0;
    for l in lens {
        end += l;
        last.push(end - 1);
    }
    g.gather_rows(x, &last)
}

#[derive(Debug, Clone, Copy)]
pub struct PrototypeBank {
    pub h: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_i: Var,
}

/// Cross-attention from prototypes to objects. Returns the learned
/// prototypes `m × d` and the attention `m × n`.
pub fn prototype_learn(g: &mut Graph, x: Var, bank: &PrototypeBank) -> Result<(Var, Var)> {
    let d = g.shape(x)[1];
    if g.shape(x)[0] == 0 {
        return Err(TensorError::Contract("prototype learning needs at least one object".into()));
    }
    let q = g.matmul(bank.h, bank.w_q)?;
    let k = g.matmul(x, bank.w_k)?;
    let v = g.matmul(x, bank.w_v)?;
    let kt = g.transpose(k)?;
    let s = g.matmul(q, kt)?;
    let s = g.scale(s, 1.0 / (d as f64).sqrt());
    let a = g.softmax(s, 1)?;
    Ok((g.matmul(a, v)?, a))
}

/// Adds the cosine-weighted mean of projected prototypes to every object.
/// Returns the infused objects and the weights `n × m`.
pub fn prototype_infuse(g: &mut Graph, x: Var, protos: Var, bank: &PrototypeBank) -> Result<(Var, Var)> {
    let m = g.shape(protos)[0];
    let cos = g.cosine_rows(x, protos)?;
    let alpha = g.softmax(cos, 1)?;
    let proj = g.matmul(protos, bank.w_i)?;
    let mix = g.matmul(alpha, proj)?;
    let mix = g.scale(mix, 1.0 / m as f64);
    Ok((g.add(x, mix)?, alpha))
}

#[derive(Debug, Clone, Copy)]
pub struct LevelOutput {
    pub infused: Var,
    pub prototypes: Var,
    pub attention: Var,
}

pub fn level_encode(g: &mut Graph, x: Var, bank: &PrototypeBank) -> Result<LevelOutput> {
    let (prototypes, attention) = prototype_learn(g, x, bank)?;
    let (infused, _) = prototype_infuse(g, x, prototypes, bank)?;
    Ok(LevelOutput {
        infused,
        prototypes,
        attention,
    })
}
