use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{parse_description, DecisionAgent, EvidenceTag, Feedback, QueryKind, Response};
use crate::error::{Error, Result};
use crate::introspection::{inex_decode, IntrospectionConfig, TokenConstraint};
use crate::model::{encode_inputs, ModelWeights};
use crate::scene::{Fact, Scene};
use crate::vocab::{self, Slot, Symbol, TokenId};

pub const DEFAULT_MAX_RESPONSE_TOKENS: usize = 8;

/// Restricts decoding to well-formed descriptions: each category at most
/// once, each followed by at most one color, action and count, and nothing
/// that feedback has already rejected.
#[derive(Debug, Clone, Default)]
pub struct DescriptionGrammar {
    banned: BTreeSet<Fact>,
    mentioned: BTreeSet<TokenId>,
    subject: Option<&'static str>,
    filled: BTreeSet<Slot>,
}

impl DescriptionGrammar {
    pub fn new(banned: BTreeSet<Fact>) -> Self {
        Self {
            banned,
            ..Self::default()
        }
    }

    fn open(&self, slot: Slot, value: &str) -> bool {
        match self.subject {
            Some(c) => !self.filled.contains(&slot) && !self.banned.contains(&Fact::new(c, slot, value)),
            None => false,
        }
    }
}

impl TokenConstraint for DescriptionGrammar {
    fn allowed(&self, token: TokenId) -> bool {
        match vocab::symbol_of(token) {
            Symbol::Special(t) => t == vocab::EOS,
            Symbol::Category(c) => !self.mentioned.contains(&token) && !self.banned.contains(&Fact::exists(c)),
            Symbol::Color(v) => self.open(Slot::Color, v),
            Symbol::Action(v) => self.open(Slot::Action, v),
            Symbol::Count(n) => self.open(Slot::Count, &n.to_string()),
            Symbol::Filler(_) => false,
        }
    }

    fn observe(&mut self, token: TokenId) {
        match vocab::symbol_of(token) {
            Symbol::Category(c) => {
                self.mentioned.insert(token);
                self.subject = Some(c);
                self.filled.clear();
            }
            Symbol::Color(_) => {
                self.filled.insert(Slot::Color);
            }
            Symbol::Action(_) => {
                self.filled.insert(Slot::Action);
            }
            Symbol::Count(_) => {
                self.filled.insert(Slot::Count);
            }
            _ => {}
        }
    }
}

/// Feedback rendered as text tokens, `[tag, subject, value]` per rejected
/// fact and a closing `SEP`, truncated to whole triples within `budget`.
pub fn feedback_tokens(feedback: &Feedback, budget: usize) -> Vec<TokenId> {
    let mut out = Vec::new();
    if budget < 4 {
        return out;
    }
    for e in feedback.evidence.iter().filter(|e| e.is_rejection()) {
        let tag = if e.tag == EvidenceTag::Conflict {
            vocab::FB_CONFLICT
        } else {
            vocab::FB_MISSING
        };
        let (Some(subject), Some(value)) = (
            vocab::category_token(&e.fact.subject),
            vocab::value_token(e.fact.slot, &e.fact.value),
        ) else {
            continue;
        };
        if out.len() + 4 > budget {
            break;
        }
        out.extend([tag, subject, value]);
    }
    if !out.is_empty() {
        out.push(vocab::SEP);
    }
    out
}

/// Decision agent backed by the toy decoder with introspective decoding.
#[derive(Debug, Clone)]
pub struct ModelDecisionAgent<'w> {
    pub weights: &'w ModelWeights,
    pub introspection: IntrospectionConfig,
    pub max_tokens: usize,
}

impl<'w> ModelDecisionAgent<'w> {
    pub fn new(weights: &'w ModelWeights, introspection: IntrospectionConfig) -> Self {
        Self {
            weights,
            introspection,
            max_tokens: DEFAULT_MAX_RESPONSE_TOKENS,
        }
    }
}

impl DecisionAgent for ModelDecisionAgent<'_> {
    fn generate(&self, scene: &Scene, query: &[TokenId], feedback: Option<&Feedback>) -> Result<Response> {
        let mut context = query.to_vec();
        let mut banned = BTreeSet::new();
        if let Some(f) = feedback {
            let used = scene.len() + query.len() + self.max_tokens;
            let budget = self.weights.config().max_context.saturating_sub(used);
            context.extend(feedback_tokens(f, budget));
            banned = f.rejected.clone();
        }
        let stream = encode_inputs(scene, &context, self.weights)?;
        let mut grammar = DescriptionGrammar::new(banned);
        let steps = inex_decode(
            &stream,
            self.weights,
            &self.introspection,
            self.max_tokens,
            &mut grammar,
        )?;
        let tokens: Vec<TokenId> = steps.iter().map(|s| s.token).take_while(|&t| t != vocab::EOS).collect();
        let facts = parse_description(&tokens);
        let max_tver = steps.iter().map(|s| s.max_tver()).fold(f64::NEG_INFINITY, f64::max);
        Ok(Response {
            answer: QueryKind::parse(query).and_then(|k| k.answer_from(&facts)),
            tokens,
            facts,
            max_tver: Some(max_tver),
            steps,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub query: Vec<TokenId>,
    pub round: usize,
    pub response: Response,
}

/// Replays canned responses keyed by `(query, round)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScriptedDecisionAgent {
    pub entries: Vec<ScriptEntry>,
}

impl ScriptedDecisionAgent {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Self { entries }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serializes")
    }
}

impl DecisionAgent for ScriptedDecisionAgent {
    fn generate(&self, _scene: &Scene, query: &[TokenId], feedback: Option<&Feedback>) -> Result<Response> {
        let round = feedback.map_or(0, |f| f.round);
        self.entries
            .iter()
            .find(|e| e.round == round && e.query == query)
            .map(|e| e.response.clone())
            .ok_or_else(|| Error::Replay(format!("no script entry for query {query:?} round {round}")))
    }
}

/// Answers initially through `inner`; on feedback drops every rejected
/// fact and adopts the offered corrections.
#[derive(Debug, Clone)]
pub struct DeferringDecisionAgent<D> {
    pub inner: D,
}

impl<D: DecisionAgent> DecisionAgent for DeferringDecisionAgent<D> {
    fn generate(&self, scene: &Scene, query: &[TokenId], feedback: Option<&Feedback>) -> Result<Response> {
        let Some(f) = feedback else {
            return self.inner.generate(scene, query, None);
        };
        let mut facts: Vec<Fact> = f
            .response
            .facts
            .iter()
            .filter(|fact| !f.rejected.contains(fact))
            .cloned()
            .collect();
        for e in &f.evidence {
            if e.tag == EvidenceTag::Correction && !facts.contains(&e.fact) {
                facts.push(e.fact.clone());
            }
        }
        Ok(Response::from_facts(facts, query))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{Evidence, Modality};
    use crate::model::{build_model, ModelConfig};
    use crate::scene::{AttrSlot, SceneObject};

    fn dog_scene() -> Scene {
        Scene::new(vec![SceneObject::new(0, "dog", [1, 1]).with(AttrSlot::Color, "red")]).unwrap()
    }

    fn tok(name: &str) -> TokenId {
        vocab::category_token(name)
            .or_else(|| vocab::color_token(name))
            .or_else(|| vocab::action_token(name))
            .unwrap()
    }

    #[test]
    fn grammar_rules() {
        let mut g = DescriptionGrammar::new([Fact::exists("cat")].into());
        assert!(g.allowed(vocab::EOS));
        assert!(!g.allowed(tok("red")));
        assert!(!g.allowed(tok("cat")));
        assert!(!g.allowed(vocab::YES));
        assert!(g.allowed(tok("dog")));
        g.observe(tok("dog"));
        assert!(!g.allowed(tok("dog")));
        assert!(g.allowed(tok("red")));
        g.observe(tok("red"));
        assert!(!g.allowed(tok("blue")));
        assert!(g.allowed(tok("running")));
        g.observe(tok("car"));
        assert!(g.allowed(tok("blue")));
    }

    #[test]
    fn model_agent_is_deterministic() {
        let w = build_model(&ModelConfig::default()).unwrap();
        let agent = ModelDecisionAgent::new(&w, IntrospectionConfig::default());
        let q = [vocab::Q_EXISTS, tok("cat"), vocab::SEP];
        let a = agent.generate(&dog_scene(), &q, None).unwrap();
        let b = agent.generate(&dog_scene(), &q, None).unwrap();
        assert_eq!(a, b);
        assert!(a.tokens.len() < DEFAULT_MAX_RESPONSE_TOKENS + 1);
        assert_eq!(parse_description(&a.tokens), a.facts);
    }

    #[test]
    fn biased_model_over_asserts_cat() {
        let mut w = build_model(&ModelConfig::default()).unwrap();
        w.add_logit_bias(tok("cat"), 50.0);
        let agent = ModelDecisionAgent::new(&w, IntrospectionConfig::disabled());
        let q = [vocab::Q_EXISTS, tok("cat"), vocab::SEP];
        let r = agent.generate(&dog_scene(), &q, None).unwrap();
        assert_eq!(r.tokens.first(), Some(&tok("cat")));
        assert_eq!(r.answer.as_deref(), Some("yes"));
        assert!(r.hallucinated_facts(&dog_scene()).any(|f| *f == Fact::exists("cat")));
    }

    #[test]
    fn bans_are_respected() {
        let mut w = build_model(&ModelConfig::default()).unwrap();
        w.add_logit_bias(tok("cat"), 50.0);
        let agent = ModelDecisionAgent::new(&w, IntrospectionConfig::default());
        let q = [vocab::Q_EXISTS, tok("cat"), vocab::SEP];
        let first = agent.generate(&dog_scene(), &q, None).unwrap();
        let fb = Feedback {
            source: Modality::Text,
            round: 1,
            evidence: vec![Evidence::new(Fact::exists("cat"), EvidenceTag::Missing)],
            rejected: [Fact::exists("cat")].into(),
            response: first,
        };
        let r = agent.generate(&dog_scene(), &q, Some(&fb)).unwrap();
        assert!(!r.facts.contains(&Fact::exists("cat")));
        assert_eq!(r.answer.as_deref(), Some("no"));
    }

    #[test]
    fn feedback_tokens_fit_budget() {
        let fb = Feedback {
            source: Modality::Text,
            round: 1,
            response: Response::default(),
            evidence: vec![
                Evidence::new(Fact::exists("cat"), EvidenceTag::Missing),
                Evidence::new(Fact::exists("dog"), EvidenceTag::Agree),
                Evidence::new(Fact::new("dog", Slot::Color, "blue"), EvidenceTag::Conflict),
            ],
            rejected: BTreeSet::new(),
        };
        assert_eq!(
            feedback_tokens(&fb, 100),
            vec![
                vocab::FB_MISSING,
                tok("cat"),
                vocab::YES,
                vocab::FB_CONFLICT,
                tok("dog"),
                tok("blue"),
                vocab::SEP
            ]
        );
        assert_eq!(feedback_tokens(&fb, 5).len(), 4);
        assert!(feedback_tokens(&fb, 3).is_empty());
    }

    #[test]
    fn scripted_agent_lookup() {
        let q = vec![vocab::Q_DESCRIBE];
        let agent = ScriptedDecisionAgent::new(vec![ScriptEntry {
            query: q.clone(),
            round: 0,
            response: Response::from_facts(vec![Fact::exists("dog")], &q),
        }]);
        let back = ScriptedDecisionAgent::from_json(&agent.to_json()).unwrap();
        assert_eq!(back, agent);
        assert!(agent.generate(&dog_scene(), &q, None).is_ok());
        let fb = Feedback {
            source: Modality::Text,
            round: 1,
            response: Response::default(),
            evidence: vec![],
            rejected: BTreeSet::new(),
        };
        assert!(matches!(
            agent.generate(&dog_scene(), &q, Some(&fb)),
            Err(Error::Replay(_))
        ));
    }

    #[test]
    fn deferring_agent_adopts_correction() {
        let q = vec![vocab::Q_COLOR, tok("dog"), vocab::SEP];
        let wrong = Response::from_facts(vec![Fact::exists("dog"), Fact::new("dog", Slot::Color, "blue")], &q);
        let agent = DeferringDecisionAgent {
            inner: ScriptedDecisionAgent::new(vec![ScriptEntry {
                query: q.clone(),
                round: 0,
                response: wrong.clone(),
            }]),
        };
        assert_eq!(agent.generate(&dog_scene(), &q, None).unwrap(), wrong);
        let fb = Feedback {
            source: Modality::Text,
            round: 1,
            response: wrong,
            evidence: vec![
                Evidence::new(Fact::new("dog", Slot::Color, "blue"), EvidenceTag::Conflict),
                Evidence::new(Fact::new("dog", Slot::Color, "red"), EvidenceTag::Correction),
            ],
            rejected: [Fact::new("dog", Slot::Color, "blue")].into(),
        };
        let revised = agent.generate(&dog_scene(), &q, Some(&fb)).unwrap();
        assert_eq!(revised.answer.as_deref(), Some("red"));
    }
}
