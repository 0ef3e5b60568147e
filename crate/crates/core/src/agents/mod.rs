//! Agent interfaces for the verification loop and their deterministic
//! simulated implementations.
//!
//! Feedback payloads are structured fact evidence rather than free text, so
//! a simulated decision agent can act on them exactly.

mod decision;
mod edit;
mod reflection;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scene::{CaptionSet, Fact, Scene};
use crate::vocab::{self, Slot, Symbol, TokenId};

pub use decision::{
    feedback_tokens, DeferringDecisionAgent, DescriptionGrammar, ModelDecisionAgent, ScriptEntry,
    ScriptedDecisionAgent, DEFAULT_MAX_RESPONSE_TOKENS,
};
pub use edit::{edit_for, SceneEditAgent};
pub use reflection::{check_facts, TextReflector, VisionReflector};

/// The kind of question a query token sequence asks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryKind {
    Exists(&'static str),
    Color(&'static str),
    Action(&'static str),
    Count(&'static str),
    Describe,
}

impl QueryKind {
    /// Reads the leading question token and its category argument.
    pub fn parse(query: &[TokenId]) -> Option<Self> {
        let (&head, rest) = query.split_first()?;
        let category = || match rest.first().map(|&t| vocab::symbol_of(t)) {
            Some(Symbol::Category(c)) => Some(c),
            _ => None,
        };
        match head {
            vocab::Q_DESCRIBE => Some(QueryKind::Describe),
            vocab::Q_EXISTS => category().map(QueryKind::Exists),
            vocab::Q_COLOR => category().map(QueryKind::Color),
            vocab::Q_ACTION => category().map(QueryKind::Action),
            vocab::Q_COUNT => category().map(QueryKind::Count),
            _ => None,
        }
    }

    /// The answer implied by a set of asserted facts.
    pub fn answer_from(&self, facts: &[Fact]) -> Option<String> {
        let find = |c: &str, slot: Slot| {
            facts
                .iter()
                .find(|f| f.subject == c && f.slot == slot)
                .map(|f| f.value.clone())
        };
        match self {
            QueryKind::Exists(c) => {
                let asserted = facts
                    .iter()
                    .any(|f| f.subject == *c && !(f.slot == Slot::Exists && f.value == "false"));
                Some(if asserted { "yes" } else { "no" }.to_string())
            }
            QueryKind::Color(c) => find(c, Slot::Color),
            QueryKind::Action(c) => find(c, Slot::Action),
            QueryKind::Count(c) => find(c, Slot::Count),
            QueryKind::Describe => None,
        }
    }
}

/// A decision agent's answer with the fact triples it asserts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Response {
    /// Emitted symbol tokens; empty for scripted responses.
    #[serde(default)]
    pub tokens: Vec<TokenId>,
    #[serde(default)]
    pub answer: Option<String>,
    pub facts: Vec<Fact>,
    /// Largest per-head TVER seen while decoding, when decoded by a model.
    #[serde(default, with = "opt_inf")]
    pub max_tver: Option<f64>,
    /// Per-step decode records; kept in memory only.
    #[serde(skip)]
    pub steps: Vec<crate::introspection::DecodeStep>,
}

impl Response {
    pub fn from_facts(facts: Vec<Fact>, query: &[TokenId]) -> Self {
        let answer = QueryKind::parse(query).and_then(|k| k.answer_from(&facts));
        Self {
            answer,
            facts,
            ..Self::default()
        }
    }

    /// Facts the scene does not make true.
    pub fn hallucinated_facts<'a>(&'a self, scene: &'a Scene) -> impl Iterator<Item = &'a Fact> {
        self.facts.iter().filter(|f| !scene.entails(f))
    }

    /// Categories the response claims are present.
    pub fn mentioned_categories(&self) -> BTreeSet<String> {
        self.facts
            .iter()
            .filter(|f| !(f.slot == Slot::Exists && f.value == "false"))
            .map(|f| f.subject.clone())
            .collect()
    }
}

mod opt_inf {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if *x == f64::INFINITY => s.serialize_str("inf"),
            other => other.serialize(s),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Num(v)) => Ok(Some(v)),
            Some(Repr::Str(s)) if s == "inf" => Ok(Some(f64::INFINITY)),
            Some(Repr::Str(s)) => Err(serde::de::Error::custom(format!("bad number {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvidenceTag {
    Agree,
    Conflict,
    Missing,
    /// A grounded fact that replaces a conflicting one.
    Correction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub fact: Fact,
    pub tag: EvidenceTag,
}

impl Evidence {
    pub fn new(fact: Fact, tag: EvidenceTag) -> Self {
        Self { fact, tag }
    }

    pub fn is_rejection(&self) -> bool {
        matches!(self.tag, EvidenceTag::Conflict | EvidenceTag::Missing)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Perspective {
    Existence,
    Color,
    Action,
    Count,
    /// Scene comparison by the vision reflector.
    Visual,
}

impl Perspective {
    /// Textual perspectives in their fixed order.
    pub const TEXTUAL: [Perspective; 4] = [
        Perspective::Existence,
        Perspective::Color,
        Perspective::Action,
        Perspective::Count,
    ];

    pub fn covers(self, slot: Slot) -> bool {
        matches!(
            (self, slot),
            (Perspective::Existence, Slot::Exists)
                | (Perspective::Color, Slot::Color)
                | (Perspective::Action, Slot::Action)
                | (Perspective::Count, Slot::Count)
                | (Perspective::Visual, _)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerspectiveVote {
    pub perspective: Perspective,
    pub repetition: usize,
    pub vote: bool,
    /// Facts this perspective rejected.
    pub evidence: Vec<Fact>,
}

/// Majority over repetitions per perspective, ties unsupported; supported
/// overall iff every perspective is.
pub fn aggregate_votes(votes: &[PerspectiveVote]) -> bool {
    let mut tallies: Vec<(Perspective, usize, usize)> = Vec::new();
    for v in votes {
        match tallies.iter_mut().find(|(p, _, _)| *p == v.perspective) {
            Some((_, yes, n)) => {
                *yes += usize::from(v.vote);
                *n += 1;
            }
            None => tallies.push((v.perspective, usize::from(v.vote), 1)),
        }
    }
    tallies.iter().all(|&(_, yes, n)| 2 * yes > n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub supported: bool,
    pub evidence: Vec<Evidence>,
    pub per_perspective_votes: Vec<PerspectiveVote>,
    /// Scene similarity for visual verdicts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
}

impl Verdict {
    pub fn rejections(&self) -> impl Iterator<Item = &Evidence> {
        self.evidence.iter().filter(|e| e.is_rejection())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Vision,
}

/// What the decision agent receives when asked to revise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub source: Modality,
    /// Index of the decision call this feedback is for; the initial call is 0.
    pub round: usize,
    /// The response the evidence refers to.
    pub response: Response,
    pub evidence: Vec<Evidence>,
    /// Every asserted fact rejected so far in the session.
    pub rejected: BTreeSet<Fact>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReflectionConfig {
    pub perspectives: usize,
    pub ensemble_size: usize,
    /// Zero keeps the fixed perspective order; any positive value shuffles it.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for ReflectionConfig {
    fn default() -> Self {
        Self {
            perspectives: 4,
            ensemble_size: 3,
            temperature: 0.7,
            seed: 0,
        }
    }
}

impl ReflectionConfig {
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if !(1..=4).contains(&self.perspectives) {
            return Err(("perspectives", "must be between 1 and 4".into()));
        }
        if self.ensemble_size == 0 {
            return Err(("ensemble_size", "must be at least 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(("temperature", "must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(field, msg)| invalid(format!("reflection.{field}: {msg}")))
    }

    pub fn active_perspectives(&self) -> &'static [Perspective] {
        &Perspective::TEXTUAL[..self.perspectives.min(4)]
    }
}

pub trait DecisionAgent: Sync {
    fn generate(&self, scene: &Scene, query: &[TokenId], feedback: Option<&Feedback>) -> Result<Response>;
}

pub trait TextReflection: Sync {
    fn verify(&self, captions: &CaptionSet, response: &Response) -> Verdict;
}

pub trait EditAgent: Sync {
    fn edit(&self, response: &Response, scene: &Scene) -> Result<Scene>;
}

pub trait VisionReflection: Sync {
    fn verify(&self, original: &Scene, edited: &Scene, gamma_clip: f64) -> Verdict;
}

/// The four agents driven by the orchestrator.
#[derive(Clone, Copy)]
pub struct Agents<'a> {
    pub decision: &'a dyn DecisionAgent,
    pub text: &'a dyn TextReflection,
    pub edit: &'a dyn EditAgent,
    pub vision: &'a dyn VisionReflection,
}

/// Reads facts off a symbol stream: a category token asserts existence and
/// becomes the subject of following attribute and count tokens.
pub fn parse_description(tokens: &[TokenId]) -> Vec<Fact> {
    let mut facts: Vec<Fact> = Vec::new();
    let mut subject: Option<&str> = None;
    for &t in tokens {
        let fact = match vocab::symbol_of(t) {
            Symbol::Category(c) => {
                subject = Some(c);
                Some(Fact::exists(c))
            }
            Symbol::Color(v) => subject.map(|c| Fact::new(c, Slot::Color, v)),
            Symbol::Action(v) => subject.map(|c| Fact::new(c, Slot::Action, v)),
            Symbol::Count(n) => subject.map(|c| Fact::new(c, Slot::Count, n.to_string())),
            Symbol::Special(_) | Symbol::Filler(_) => None,
        };
        if let Some(f) = fact {
            if !facts.contains(&f) {
                facts.push(f);
            }
        }
    }
    facts
}
