//! Retrieval, cleaning and refinement stages.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    ContradictionSplitter, KgError, MedicalKG, RelationId, RelationSuggester, Result, ScoredTriplet, Source,
    TextEmbedder, Triplet, TripletJudge,
};
use crate::ehr::{CodeId, CodeTable};
use crate::optim::Adam;
use crate::tensor::{Graph, Tensor};

/// Interned relation names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelationTable {
    names: Vec<String>,
    index: HashMap<String, RelationId>,
}

impl RelationTable {
    pub fn intern(&mut self, name: &str) -> RelationId {
        if let Some(id) = self.index.get(name) {
            return *id;
        }
        let id = self.names.len() as RelationId;
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<RelationId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: RelationId) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateSet {
    pub relations: RelationTable,
    pub triplets: Vec<Triplet>,
}

impl CandidateSet {
    /// Surface text `"head relation tail"` used by judges and embedders.
    pub fn text(&self, codes: &CodeTable, t: &Triplet) -> String {
        format!(
            "{} {} {}",
            codes.name(t.head).unwrap_or("?"),
            self.relations.name(t.relation),
            codes.name(t.tail).unwrap_or("?")
        )
    }
}

/// Queries every unordered code pair once, lower id first.
pub fn retrieve_candidates(codes: &CodeTable, suggester: &dyn RelationSuggester) -> Result<CandidateSet> {
    let all = codes.codes();
    if all.len() < 2 {
        return Err(KgError::Config("need at least two codes".into()));
    }
    let pairs: Vec<(usize, usize)> = (0..all.len()).flat_map(|i| (i + 1..all.len()).map(move |j| (i, j))).collect();
    let answers: Vec<Option<String>> = pairs
        .par_iter()
        .map(|&(i, j)| match suggester.suggest(&all[i].name, &all[j].name) {
            Ok(r) => r.filter(|s| !s.trim().is_empty()),
            Err(e) => {
                log::warn!("suggester failed on ({}, {}): {e}", all[i].name, all[j].name);
                None
            }
        })
        .collect();
    let mut out = CandidateSet::default();
    for ((i, j), rel) in pairs.into_iter().zip(answers) {
        if let Some(rel) = rel {
            let relation = out.relations.intern(rel.trim());
            out.triplets.push(Triplet {
                head: all[i].id,
                relation,
                tail: all[j].id,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanConfig {
    pub label_budget: usize,
    pub select_multiple: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self {
            label_budget: 500,
            select_multiple: 5,
            hidden: 64,
            epochs: 200,
            lr: 1e-3,
            batch_size: 32,
            threshold: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanReport {
    pub candidates: usize,
    pub labeled: usize,
    pub verified: usize,
    /// Unlabeled candidates scoring at or above the threshold.
    pub classifier_positive: usize,
    pub selected: usize,
}

#[derive(Debug, Clone)]
pub struct CleanOutput {
    pub scored: Vec<ScoredTriplet>,
    pub report: CleanReport,
    pub classifier: Mlp,
    /// Candidate indices that were sent to the judge.
    pub labeled: Vec<usize>,
}

/// Two-layer perceptron with a single logit output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("sized")
}

fn batch_tensor(xs: &[Vec<f64>], idx: &[usize]) -> Tensor {
    let d = xs[idx[0]].len();
    let mut data = Vec::with_capacity(idx.len() * d);
    for i in idx {
        data.extend_from_slice(&xs[*i]);
    }
    Tensor::new(vec![idx.len(), d], data).expect("sized")
}

impl Mlp {
    pub fn new(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: xavier(rng, input, hidden),
            b1: Tensor::zeros(&[1, hidden]),
            w2: xavier(rng, hidden, 1),
            b2: Tensor::zeros(&[1, 1]),
        }
    }

    fn logits(&self, g: &mut Graph, x: Tensor) -> Result<[crate::tensor::Var; 5]> {
        let n = x.rows();
        let map = |e: crate::tensor::TensorError| KgError::Invalid(e.to_string());
        let x = g.constant(x);
        let w1 = g.param(self.w1.clone());
        let b1 = g.param(self.b1.clone());
        let w2 = g.param(self.w2.clone());
        let b2 = g.param(self.b2.clone());
        let h = g.matmul(x, w1).map_err(map)?;
        let bb = g.repeat_rows(b1, n).map_err(map)?;
        let h = g.add(h, bb).map_err(map)?;
        let h = g.relu(h);
        let z = g.matmul(h, w2).map_err(map)?;
        let bb = g.repeat_rows(b2, n).map_err(map)?;
        let z = g.add(z, bb).map_err(map)?;
        Ok([z, w1, b1, w2, b2])
    }

    /// Minibatch Adam on binary cross-entropy.
    pub fn fit(&mut self, xs: &[Vec<f64>], ys: &[f64], cfg: &CleanConfig, rng: &mut ChaCha8Rng) -> Result<()> {
        let mut opt = Adam::new(cfg.lr);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        for _ in 0..cfg.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let mut g = Graph::training();
                let [z, w1, b1, w2, b2] = self.logits(&mut g, batch_tensor(xs, chunk))?;
                let y: Vec<f64> = chunk.iter().map(|i| ys[*i]).collect();
                let loss = g.bce_with_logits(z, &y, 1.0).map_err(|e| KgError::Invalid(e.to_string()))?;
                g.backward(loss).map_err(|e| KgError::Invalid(e.to_string()))?;
                opt.begin_step();
                for (name, v, p) in [
                    ("w1", w1, &mut self.w1),
                    ("b1", b1, &mut self.b1),
                    ("w2", w2, &mut self.w2),
                    ("b2", b2, &mut self.b2),
                ] {
                    if let Some(gr) = g.grad(v) {
                        opt.update(name, p, &gr);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn predict_proba(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let idx: Vec<usize> = (0..xs.len()).collect();
        let mut g = Graph::new();
        let [z, ..] = self.logits(&mut g, batch_tensor(xs, &idx))?;
        Ok(g.value(z).data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect())
    }
}

/// Labels a random subset with the judge, trains the classifier on it and
/// keeps every verified triplet plus the best-scoring unlabeled ones.
pub fn clean_candidates(
    cands: &CandidateSet,
    codes: &CodeTable,
    judge: &dyn TripletJudge,
    embedder: &dyn TextEmbedder,
    cfg: &CleanConfig,
) -> Result<CleanOutput> {
    let n = cands.triplets.len();
    if cfg.label_budget == 0 || cfg.label_budget > n {
        return Err(KgError::Config(format!(
            "label budget {} must be in 1..={n}",
            cfg.label_budget
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let all: Vec<usize> = (0..n).collect();
    let mut labeled: Vec<usize> = all.choose_multiple(&mut rng, cfg.label_budget).copied().collect();
    labeled.sort_unstable();

    let texts: Vec<String> = cands.triplets.iter().map(|t| cands.text(codes, t)).collect();
    let verdicts: Vec<Option<bool>> = labeled
        .par_iter()
        .map(|i| match judge.judge(&texts[*i]) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("judge failed on {:?}: {e}", texts[*i]);
                None
            }
        })
        .collect();
    let embeddings: Vec<Vec<f64>> = texts.par_iter().map(|t| embedder.embed(t)).collect::<Result<_>>()?;

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut verified = Vec::new();
    for (i, v) in labeled.iter().zip(&verdicts) {
        if let Some(v) = v {
            xs.push(embeddings[*i].clone());
            ys.push(if *v { 1.0 } else { 0.0 });
            if *v {
                verified.push(*i);
            }
        }
    }
    if verified.is_empty() {
        return Err(KgError::NoVerified);
    }

    let mut clf = Mlp::new(embedder.dim(), cfg.hidden, &mut rng);
    clf.fit(&xs, &ys, cfg, &mut rng)?;

    let is_labeled: BTreeSet<usize> = labeled.iter().copied().collect();
    let rest: Vec<usize> = all.iter().copied().filter(|i| !is_labeled.contains(i)).collect();
    let rest_x: Vec<Vec<f64>> = rest.iter().map(|i| embeddings[*i].clone()).collect();
    let probs = clf.predict_proba(&rest_x)?;
    let mut passing: Vec<(usize, f64)> = rest.iter().copied().zip(probs).filter(|(_, p)| *p >= cfg.threshold).collect();
    let classifier_positive = passing.len();
    passing.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    passing.truncate(cfg.select_multiple * verified.len());

    let mut scored: Vec<ScoredTriplet> = verified
        .iter()
        .map(|i| ScoredTriplet {
            triplet: cands.triplets[*i],
            source: Source::Verified,
            score: 1.0,
        })
        .collect();
    scored.extend(passing.iter().map(|(i, p)| ScoredTriplet {
        triplet: cands.triplets[*i],
        source: Source::Classifier,
        score: *p,
    }));
    Ok(CleanOutput {
        report: CleanReport {
            candidates: n,
            labeled: xs.len(),
            verified: verified.len(),
            classifier_positive,
            selected: passing.len(),
        },
        scored,
        classifier: clf,
        labeled,
    })
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, x: usize) -> usize {
        let p = self.0[x];
        if p == x {
            return x;
        }
        let r = self.find(p);
        self.0[x] = r;
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// One clustering pass: canonical name for each of `names`.
fn refine_pass(
    names: &[String],
    embedder: &dyn TextEmbedder,
    splitter: &dyn ContradictionSplitter,
    threshold: f64,
) -> Result<BTreeMap<String, String>> {
    let n = names.len();
    let mut rename: BTreeMap<String, String> = names.iter().map(|s| (s.clone(), s.clone())).collect();
    if n < 2 {
        return Ok(rename);
    }
    let emb: Vec<Vec<f64>> = names.iter().map(|s| embedder.embed(s)).collect::<Result<_>>()?;
    let mut condensed = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = emb[i].iter().zip(&emb[j]).map(|(a, b)| (a - b).powi(2)).sum();
            condensed.push(d.sqrt());
        }
    }
    let dendro = kodama::linkage(&mut condensed, n, kodama::Method::Ward);
    // Cluster label n + k is created by step k.
    let mut uf = UnionFind((0..2 * n).collect());
    for (k, step) in dendro.steps().iter().enumerate() {
        if step.dissimilarity < threshold {
            uf.union(step.cluster1, n + k);
            uf.union(step.cluster2, n + k);
        }
    }
    let mut groups: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (i, name) in names.iter().enumerate() {
        groups.entry(uf.find(i)).or_default().push(name.clone());
    }
    for members in groups.into_values().filter(|m| m.len() > 1) {
        let parts = splitter.split(&members)?;
        let covered: BTreeSet<&String> = parts.iter().flatten().collect();
        let parts = if covered.len() == members.len() && parts.iter().map(Vec::len).sum::<usize>() == members.len() {
            parts
        } else {
            log::warn!("splitter returned a non-partition for {members:?}; keeping members apart");
            members.iter().map(|m| vec![m.clone()]).collect()
        };
        for part in parts {
            let canon = part.iter().min().expect("nonempty part").clone();
            for m in part {
                rename.insert(m, canon.clone());
            }
        }
    }
    Ok(rename)
}

/// Merges near-synonymous relations, repeating until no pass renames
/// anything, and builds the graph from the rewritten facts.
pub fn refine_relations(
    codes: &CodeTable,
    scored: &[ScoredTriplet],
    relations: &RelationTable,
    embedder: &dyn TextEmbedder,
    splitter: &dyn ContradictionSplitter,
    threshold: f64,
) -> Result<MedicalKG> {
    let facts: Vec<(CodeId, String, CodeId)> = scored
        .iter()
        .map(|s| (s.triplet.head, relations.name(s.triplet.relation).to_string(), s.triplet.tail))
        .collect();
    let mut current: BTreeMap<String, String> = facts.iter().map(|f| (f.1.clone(), f.1.clone())).collect();
    loop {
        let names: Vec<String> = current.values().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        let pass = refine_pass(&names, embedder, splitter, threshold)?;
        if pass.iter().all(|(k, v)| k == v) {
            break;
        }
        for v in current.values_mut() {
            *v = pass[v].clone();
        }
    }
    let named: Vec<(String, String, String)> = facts
        .iter()
        .map(|(h, r, t)| {
            let name = |c: CodeId| codes.name(c).map(str::to_string).ok_or_else(|| KgError::Invalid(format!("unknown code {c}")));
            Ok((name(*h)?, current[r].clone(), name(*t)?))
        })
        .collect::<Result<_>>()?;
    MedicalKG::from_named(codes.clone(), &named)
}

impl MedicalKG {
    /// Facts as verified scored triplets plus their relation table, the
    /// input shape of [`refine_relations`].
    pub fn to_scored(&self) -> (Vec<ScoredTriplet>, RelationTable) {
        let mut table = RelationTable::default();
        for r in self.relations() {
            table.intern(r);
        }
        let scored = self
            .facts()
            .iter()
            .map(|t| ScoredTriplet {
                triplet: *t,
                source: Source::Verified,
                score: 1.0,
            })
            .collect();
        (scored, table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{generate_synthetic_cohort, GeneratorConfig, MedicalCode};
    use crate::kg::mocks::{CooccurrenceSuggester, HashEmbedder, NegationSplitter, TokenRuleJudge};
    use crate::kg::tests::table;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn queries_each_pair_once() {
        let codes = CodeTable::new(table().codes()[..4].to_vec()).unwrap();
        let calls = AtomicUsize::new(0);
        let s = |_: &str, _: &str| -> crate::kg::ProviderResult<Option<String>> {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(None)
        };
        let out = retrieve_candidates(&codes, &s).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 6);
        assert!(out.triplets.is_empty());
    }

    #[test]
    fn failing_pairs_are_skipped() {
        let s = |h: &str, _: &str| -> crate::kg::ProviderResult<Option<String>> {
            if h == "d1" {
                Err(KgError::Provider("boom".into()))
            } else {
                Ok(Some("linked to".into()))
            }
        };
        let out = retrieve_candidates(&table(), &s).unwrap();
        assert_eq!(out.triplets.len(), 15 - 5);
        assert_eq!(out.relations.len(), 1);
    }

    #[test]
    fn planted_pairs_are_retrieved() {
        let cfg = GeneratorConfig {
            n_patients: 400,
            ..Default::default()
        };
        let (ds, truth) = generate_synthetic_cohort(&cfg, 2).unwrap();
        let s = CooccurrenceSuggester::from_dataset(&ds, 5, 0.3);
        let out = retrieve_candidates(&ds.codes, &s).unwrap();
        let got: BTreeSet<(CodeId, CodeId)> = out.triplets.iter().map(|t| (t.head, t.tail)).collect();
        for (d, m) in truth.cluster_pairs() {
            assert!(got.contains(&(d.min(m), d.max(m))), "missing ({d}, {m})");
        }
    }

    fn rule_corpus(n: usize) -> (CodeTable, CandidateSet) {
        let codes: Vec<MedicalCode> = (0..n)
            .map(|i| MedicalCode {
                id: i as u32 + 1,
                name: format!("C{i:03}"),
                kind: crate::ehr::CodeKind::Diagnosis,
            })
            .collect();
        let codes = CodeTable::new(codes).unwrap();
        let words = ["linked", "bound", "joined", "tied", "paired", "mapped", "fused", "near"];
        let s = |h: &str, t: &str| -> crate::kg::ProviderResult<Option<String>> {
            let k = (h.len() * 31 + t.bytes().map(usize::from).sum::<usize>() * 7 + h.bytes().map(usize::from).sum::<usize>()) % 16;
            let rel = if k < 8 {
                format!("{} via route", words[k])
            } else {
                format!("{} via marker", words[k - 8])
            };
            Ok(Some(rel))
        };
        (codes.clone(), retrieve_candidates(&codes, &s).unwrap())
    }

    #[test]
    fn classifier_learns_planted_rule() {
        let (codes, cands) = rule_corpus(30);
        let judge = TokenRuleJudge::new(&["marker"], &[]);
        let emb = HashEmbedder::default();
        let budget = (cands.triplets.len() as f64 * 0.3) as usize;
        let cfg = CleanConfig {
            label_budget: budget,
            ..Default::default()
        };
        let out = clean_candidates(&cands, &codes, &judge, &emb, &cfg).unwrap();
        let held: BTreeSet<usize> = out.labeled.iter().copied().collect();
        let rest: Vec<usize> = (0..cands.triplets.len()).filter(|i| !held.contains(i)).collect();
        let xs: Vec<Vec<f64>> = rest.iter().map(|i| emb.embed(&cands.text(&codes, &cands.triplets[*i])).unwrap()).collect();
        let p = out.classifier.predict_proba(&xs).unwrap();
        let correct = rest
            .iter()
            .zip(&p)
            .filter(|(i, p)| judge.judge(&cands.text(&codes, &cands.triplets[**i])).unwrap() == (**p >= 0.5))
            .count();
        let acc = correct as f64 / rest.len() as f64;
        assert!(acc >= 0.9, "held-out accuracy {acc}");
        assert!(out.report.selected <= 5 * out.report.verified);
        let verified = out.scored.iter().filter(|s| s.source == Source::Verified).count();
        assert_eq!(verified, out.report.verified);
        assert!(out.scored.iter().filter(|s| s.source == Source::Verified).all(|s| s.score == 1.0));
    }

    #[test]
    fn selection_cap_and_all_true() {
        let (codes, cands) = rule_corpus(20);
        let yes = TokenRuleJudge::new(&["via"], &[]);
        let cfg = CleanConfig {
            label_budget: cands.triplets.len(),
            epochs: 2,
            ..Default::default()
        };
        let out = clean_candidates(&cands, &codes, &yes, &HashEmbedder::default(), &cfg).unwrap();
        let got: Vec<Triplet> = out.scored.iter().map(|s| s.triplet).collect();
        assert_eq!(got, cands.triplets);

        let no = TokenRuleJudge::new(&["absent"], &[]);
        let cfg = CleanConfig {
            label_budget: 10,
            epochs: 2,
            ..Default::default()
        };
        assert!(matches!(
            clean_candidates(&cands, &codes, &no, &HashEmbedder::default(), &cfg),
            Err(KgError::NoVerified)
        ));
        let cfg = CleanConfig {
            label_budget: cands.triplets.len() + 1,
            ..Default::default()
        };
        assert!(clean_candidates(&cands, &codes, &yes, &HashEmbedder::default(), &cfg).is_err());
    }

    struct StemEmbedder;

    impl TextEmbedder for StemEmbedder {
        fn dim(&self) -> usize {
            2
        }

        fn embed(&self, _: &str) -> crate::kg::ProviderResult<Vec<f64>> {
            Ok(vec![1.0, 0.0])
        }
    }

    fn scored(names: &[&str]) -> (Vec<ScoredTriplet>, RelationTable) {
        let mut rt = RelationTable::default();
        let s = names
            .iter()
            .enumerate()
            .map(|(i, n)| ScoredTriplet {
                triplet: Triplet {
                    head: 1 + (i as u32 % 3),
                    relation: rt.intern(n),
                    tail: 4 + (i as u32 % 3),
                },
                source: Source::Verified,
                score: 1.0,
            })
            .collect();
        (s, rt)
    }

    #[test]
    fn negation_split_leaves_two_relations() {
        let (s, rt) = scored(&["treats", "treat", "does not treat"]);
        let kg = refine_relations(&table(), &s, &rt, &StemEmbedder, &NegationSplitter::default(), 0.5).unwrap();
        assert_eq!(kg.relations(), &["does not treat".to_string(), "treat".to_string()]);
        assert_eq!(kg.facts().len(), 3);
    }

    #[test]
    fn identical_and_zero_threshold() {
        let (s, rt) = scored(&["treats", "treats", "treats"]);
        let kg = refine_relations(&table(), &s, &rt, &HashEmbedder::default(), &NegationSplitter::default(), 1.0).unwrap();
        assert_eq!(kg.num_relations(), 1);
        let (s, rt) = scored(&["a", "b", "c"]);
        let kg = refine_relations(&table(), &s, &rt, &StemEmbedder, &NegationSplitter::default(), 0.0).unwrap();
        assert_eq!(kg.num_relations(), 3);
    }

    #[test]
    fn refinement_is_idempotent_and_keeps_verified() {
        let cfg = GeneratorConfig {
            n_patients: 300,
            ..Default::default()
        };
        let (ds, _) = generate_synthetic_cohort(&cfg, 4).unwrap();
        let cands = retrieve_candidates(&ds.codes, &CooccurrenceSuggester::from_dataset(&ds, 3, 0.3)).unwrap();
        let scored: Vec<ScoredTriplet> = cands
            .triplets
            .iter()
            .map(|t| ScoredTriplet {
                triplet: *t,
                source: Source::Verified,
                score: 1.0,
            })
            .collect();
        let emb = HashEmbedder::default();
        let split = NegationSplitter::default();
        let kg = refine_relations(&ds.codes, &scored, &cands.relations, &emb, &split, crate::kg::DEFAULT_WARD_THRESHOLD).unwrap();
        assert!(kg.num_relations() * 2 <= cands.relations.len(), "{} -> {}", cands.relations.len(), kg.num_relations());
        let pairs: BTreeSet<(CodeId, CodeId)> = kg.facts().iter().map(|t| (t.head, t.tail)).collect();
        assert!(cands.triplets.iter().all(|t| pairs.contains(&(t.head, t.tail))));
        let (s2, rt2) = kg.to_scored();
        let again = refine_relations(&ds.codes, &s2, &rt2, &emb, &split, crate::kg::DEFAULT_WARD_THRESHOLD).unwrap();
        assert_eq!(again, kg);
    }
}
