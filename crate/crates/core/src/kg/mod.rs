//! Medical knowledge graph over the code vocabulary and the pipeline that
//! builds it: candidate retrieval, classifier-based cleaning and relation
//! refinement.

mod io;
mod mocks;
mod pipeline;
mod provider;

pub use io::{load_kg, read_kg, save_kg, write_kg};
pub use mocks::{CooccurrenceSuggester, HashEmbedder, NegationSplitter, TokenRuleJudge};
pub use pipeline::{
    clean_candidates, refine_relations, retrieve_candidates, CandidateSet, CleanConfig, CleanOutput,
    CleanReport, Mlp, RelationTable,
};
#[cfg(feature = "provider")]
pub use provider::ProviderClient;
pub use provider::{ProviderConfig, KEY_ENV as PROVIDER_KEY_ENV, URL_ENV as PROVIDER_URL_ENV};

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ehr::{CodeId, CodeKind, CodeTable};

#[derive(Debug, Error)]
pub enum KgError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid fact: {0}")]
    Invalid(String),
    #[error("no candidate was verified; raise the label budget")]
    NoVerified,
    #[error("provider: {0}")]
    Provider(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KgError>;

/// Failure reported by an external suggester, judge, embedder or splitter.
pub type ProviderResult<T> = std::result::Result<T, KgError>;

pub type RelationId = u32;

/// Ward dissimilarity below which relation clusters merge.
pub const DEFAULT_WARD_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub head: CodeId,
    pub relation: RelationId,
    pub tail: CodeId,
}

/// Unordered pair of endpoint kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeKind {
    DD,
    DP,
    DM,
    PP,
    PM,
    MM,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 6] = [EdgeKind::DD, EdgeKind::DP, EdgeKind::DM, EdgeKind::PP, EdgeKind::PM, EdgeKind::MM];

    pub fn of(a: CodeKind, b: CodeKind) -> Self {
        use CodeKind::*;
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        match (a, b) {
            (Diagnosis, Diagnosis) => EdgeKind::DD,
            (Diagnosis, Procedure) => EdgeKind::DP,
            (Diagnosis, Medication) => EdgeKind::DM,
            (Procedure, Procedure) => EdgeKind::PP,
            (Procedure, Medication) => EdgeKind::PM,
            (Medication, Medication) => EdgeKind::MM,
            _ => unreachable!("pair is ordered"),
        }
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for EdgeKind {
    type Err = KgError;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        let mut it = up.chars();
        let kind = |c: Option<char>| match c {
            Some('D') => Some(CodeKind::Diagnosis),
            Some('P') => Some(CodeKind::Procedure),
            Some('M') => Some(CodeKind::Medication),
            _ => None,
        };
        match (kind(it.next()), kind(it.next()), it.next()) {
            (Some(a), Some(b), None) => Ok(EdgeKind::of(a, b)),
            _ => Err(KgError::Config(format!("unknown edge kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Verified,
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriplet {
    pub triplet: Triplet,
    pub source: Source,
    pub score: f64,
}

/// Proposes a relation from `head` to `tail`, if any.
pub trait RelationSuggester: Sync {
    fn suggest(&self, head: &str, tail: &str) -> ProviderResult<Option<String>>;
}

impl<F> RelationSuggester for F
where
    F: Fn(&str, &str) -> ProviderResult<Option<String>> + Sync,
{
    fn suggest(&self, head: &str, tail: &str) -> ProviderResult<Option<String>> {
        self(head, tail)
    }
}

/// Labels the text `"head relation tail"` as valid or not.
pub trait TripletJudge: Sync {
    fn judge(&self, text: &str) -> ProviderResult<bool>;
}

/// Maps text to a fixed-length unit vector.
pub trait TextEmbedder: Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> ProviderResult<Vec<f64>>;
}

/// Partitions a cluster of relation names so that no part holds two
/// contradictory relations.
pub trait ContradictionSplitter: Sync {
    fn split(&self, members: &[String]) -> ProviderResult<Vec<Vec<String>>>;
}

/// Knowledge graph with forward facts only; inverse edges are derived.
///
/// Relation `r` has inverse `r + R` where `R` is the relation count.
#[derive(Debug, Clone, PartialEq)]
pub struct MedicalKG {
    codes: CodeTable,
    relations: Vec<String>,
    facts: Vec<Triplet>,
}

impl MedicalKG {
    /// Graph with no facts.
    pub fn empty(codes: CodeTable) -> Self {
        Self {
            codes,
            relations: Vec::new(),
            facts: Vec::new(),
        }
    }

    /// Validates and deduplicates facts, keeping them sorted.
    pub fn new(codes: CodeTable, relations: Vec<String>, facts: impl IntoIterator<Item = Triplet>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for t in facts {
            if t.head == t.tail {
                return Err(KgError::Invalid(format!("self-loop on code {}", t.head)));
            }
            for c in [t.head, t.tail] {
                if codes.get(c).is_none() {
                    return Err(KgError::Invalid(format!("unknown code id {c}")));
                }
            }
            if t.relation as usize >= relations.len() {
                return Err(KgError::Invalid(format!("unknown relation id {}", t.relation)));
            }
            set.insert(t);
        }
        Ok(Self {
            codes,
            relations,
            facts: set.into_iter().collect(),
        })
    }

    /// Builds a graph from named facts. The relation table is the sorted
    /// set of names in use.
    pub fn from_named<S: AsRef<str>>(codes: CodeTable, facts: &[(S, S, S)]) -> Result<Self> {
        let names: BTreeSet<&str> = facts.iter().map(|f| f.1.as_ref()).collect();
        let relations: Vec<String> = names.into_iter().map(str::to_string).collect();
        let mut out = Vec::with_capacity(facts.len());
        for (h, r, t) in facts {
            let id = |n: &str| {
                codes
                    .by_name(n)
                    .map(|c| c.id)
                    .ok_or_else(|| KgError::Invalid(format!("unknown code name {n:?}")))
            };
            let relation = relations.binary_search_by(|x| x.as_str().cmp(r.as_ref())).expect("interned") as RelationId;
            out.push(Triplet {
                head: id(h.as_ref())?,
                relation,
                tail: id(t.as_ref())?,
            });
        }
        Self::new(codes, relations, out)
    }

    pub fn codes(&self) -> &CodeTable {
        &self.codes
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// Forward facts.
    pub fn facts(&self) -> &[Triplet] {
        &self.facts
    }

    pub fn relation_name(&self, r: RelationId) -> Option<&str> {
        self.relations.get(r as usize).map(String::as_str)
    }

    pub fn inverse(&self, r: RelationId) -> RelationId {
        let n = self.relations.len() as RelationId;
        if r < n {
            r + n
        } else {
            r - n
        }
    }

    /// Forward facts followed by their reversed counterparts.
    pub fn finalized(&self) -> Vec<Triplet> {
        let mut out = self.facts.clone();
        out.extend(self.facts.iter().map(|t| Triplet {
            head: t.tail,
            relation: self.inverse(t.relation),
            tail: t.head,
        }));
        out
    }

    pub fn edge_kind(&self, t: &Triplet) -> EdgeKind {
        let k = |c| self.codes.kind(c).expect("validated endpoint");
        EdgeKind::of(k(t.head), k(t.tail))
    }

    /// Copy without any fact whose edge kind is listed. Relation ids are
    /// kept stable.
    pub fn ablate_edges(&self, kinds: &BTreeSet<EdgeKind>) -> Result<Self> {
        if kinds.is_empty() {
            return Err(KgError::Config("no edge kinds given".into()));
        }
        Ok(Self {
            codes: self.codes.clone(),
            relations: self.relations.clone(),
            facts: self.facts.iter().filter(|t| !kinds.contains(&self.edge_kind(t))).copied().collect(),
        })
    }

    /// Fact counts per edge kind.
    pub fn kind_counts(&self) -> Vec<(EdgeKind, usize)> {
        EdgeKind::ALL
            .iter()
            .map(|k| (*k, self.facts.iter().filter(|t| self.edge_kind(t) == *k).count()))
            .collect()
    }
}
