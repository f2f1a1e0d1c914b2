//! Offline, deterministic stand-ins for the language-model roles.

use std::collections::{BTreeSet, HashMap};

use sha2::{Digest, Sha256};

use super::{ContradictionSplitter, ProviderResult, RelationSuggester, TextEmbedder, TripletJudge};
use crate::ehr::{CodeId, CodeKind, EhrDataset};

const WEAK: [&str; 3] = ["weakly associated with", "possibly related to", "rarely seen with"];

fn phrases(a: CodeKind, b: CodeKind) -> &'static [&'static str] {
    use CodeKind::*;
    match (a, b) {
        (Diagnosis, Diagnosis) => &["co-occurs with", "co occurs with", "comorbid with", "is comorbid with"],
        (Diagnosis, Procedure) => &["treated by procedure", "is treated by procedure", "managed with procedure", "is managed with procedure"],
        (Diagnosis, Medication) => &["treated by", "is treated by", "treated with", "is treated with"],
        (Procedure, Procedure) => &["performed with", "is performed with", "precedes"],
        (Procedure, Medication) => &["given with", "is given with", "administered with"],
        (Medication, Medication) => &["co-prescribed with", "coprescribed with", "prescribed with"],
        (x, y) => phrases(y, x),
    }
}

fn hash_pick(key: &str, n: usize) -> usize {
    let h = Sha256::digest(key.as_bytes());
    u32::from_le_bytes([h[0], h[1], h[2], h[3]]) as usize % n
}

/// Suggests relations for code pairs that share visits often enough.
///
/// Pairs seen together at least `min_count` times get a relation. When the
/// pair covers at least `strong_ratio` of the rarer code's visits the
/// relation is a plausible clinical phrase chosen by kind, otherwise a
/// vague association phrase. Phrase variants are picked by hashing the
/// pair, so the corpus has synonyms for refinement to merge.
#[derive(Debug, Clone)]
pub struct CooccurrenceSuggester {
    ids: HashMap<String, (CodeId, CodeKind)>,
    single: HashMap<CodeId, usize>,
    pairs: HashMap<(CodeId, CodeId), usize>,
    pub min_count: usize,
    pub strong_ratio: f64,
}

impl CooccurrenceSuggester {
    pub fn from_dataset(ds: &EhrDataset, min_count: usize, strong_ratio: f64) -> Self {
        let mut single = HashMap::new();
        let mut pairs = HashMap::new();
        for v in ds.patients.iter().flat_map(|p| &p.visits) {
            for (i, a) in v.codes.iter().enumerate() {
                *single.entry(*a).or_insert(0) += 1;
                for b in &v.codes[i + 1..] {
                    *pairs.entry((*a, *b)).or_insert(0) += 1;
                }
            }
        }
        let ids = ds.codes.codes().iter().map(|c| (c.name.clone(), (c.id, c.kind))).collect();
        Self {
            ids,
            single,
            pairs,
            min_count: min_count.max(1),
            strong_ratio,
        }
    }

    /// Pairs that would receive a plausible relation.
    pub fn strong_pairs(&self) -> BTreeSet<(CodeId, CodeId)> {
        self.pairs
            .iter()
            .filter(|(k, n)| self.is_strong(**k, **n))
            .map(|(k, _)| *k)
            .collect()
    }

    fn is_strong(&self, (a, b): (CodeId, CodeId), n: usize) -> bool {
        let rarer = self.single[&a].min(self.single[&b]).max(1);
        n >= self.min_count && n as f64 / rarer as f64 >= self.strong_ratio
    }
}

impl RelationSuggester for CooccurrenceSuggester {
    fn suggest(&self, head: &str, tail: &str) -> ProviderResult<Option<String>> {
        let (Some(&(a, ka)), Some(&(b, kb))) = (self.ids.get(head), self.ids.get(tail)) else {
            return Ok(None);
        };
        let key = if a < b { (a, b) } else { (b, a) };
        let Some(&n) = self.pairs.get(&key) else {
            return Ok(None);
        };
        if n < self.min_count {
            return Ok(None);
        }
        let pair = format!("{head}|{tail}");
        let rel = if self.is_strong(key, n) {
            let p = phrases(ka, kb);
            p[hash_pick(&pair, p.len())]
        } else {
            WEAK[hash_pick(&pair, WEAK.len())]
        };
        Ok(Some(rel.to_string()))
    }
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|t| t.to_lowercase())
}

/// Accepts a text when it contains an accepted token and no rejected one.
#[derive(Debug, Clone, Default)]
pub struct TokenRuleJudge {
    pub accept: BTreeSet<String>,
    pub reject: BTreeSet<String>,
}

impl TokenRuleJudge {
    pub fn new(accept: &[&str], reject: &[&str]) -> Self {
        Self {
            accept: accept.iter().map(|s| s.to_lowercase()).collect(),
            reject: reject.iter().map(|s| s.to_lowercase()).collect(),
        }
    }

    /// Judge matching the vocabulary of [`CooccurrenceSuggester`].
    pub fn clinical() -> Self {
        Self::new(
            &[
                "co-occurs", "occurs", "comorbid", "treated", "managed", "performed", "precedes", "given",
                "administered", "prescribed", "co-prescribed", "coprescribed",
            ],
            &["weakly", "possibly", "rarely", "not", "no", "never"],
        )
    }
}

impl TripletJudge for TokenRuleJudge {
    fn judge(&self, text: &str) -> ProviderResult<bool> {
        let toks: Vec<String> = tokens(text).collect();
        Ok(toks.iter().any(|t| self.accept.contains(t)) && !toks.iter().any(|t| self.reject.contains(t)))
    }
}

/// Signed random projection of hashed character n-grams, unit length.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
    pub ngram: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self {
            dim: 64,
            seed: 0,
            ngram: 3,
        }
    }
}

impl HashEmbedder {
    fn features(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        for w in tokens(text) {
            let padded: Vec<char> = format!("<{w}>").chars().collect();
            if padded.len() <= self.ngram {
                out.push(padded.iter().collect());
            } else {
                out.extend(padded.windows(self.ngram).map(|g| g.iter().collect::<String>()));
            }
            out.push(format!("w:{w}"));
        }
        out
    }
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> ProviderResult<Vec<f64>> {
        let mut v = vec![0.0; self.dim];
        for f in self.features(text) {
            let mut h = Sha256::new();
            h.update(self.seed.to_le_bytes());
            h.update(f.as_bytes());
            let d = h.finalize();
            for k in 0..4 {
                let idx = u16::from_le_bytes([d[3 * k], d[3 * k + 1]]) as usize % self.dim;
                let sign = if d[3 * k + 2] & 1 == 0 { 1.0 } else { -1.0 };
                v[idx] += sign;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= n);
        }
        Ok(v)
    }
}

/// Separates negated relations ("not", "no", "never") from the rest.
#[derive(Debug, Clone)]
pub struct NegationSplitter {
    pub tokens: BTreeSet<String>,
}

impl Default for NegationSplitter {
    fn default() -> Self {
        Self {
            tokens: ["not", "no", "never"].iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ContradictionSplitter for NegationSplitter {
    fn split(&self, members: &[String]) -> ProviderResult<Vec<Vec<String>>> {
        let (neg, pos): (Vec<String>, Vec<String>) =
            members.iter().cloned().partition(|m| tokens(m).any(|t| self.tokens.contains(&t)));
        Ok([pos, neg].into_iter().filter(|p| !p.is_empty()).collect())
    }
}
