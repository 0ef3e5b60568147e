//! The alternating text/vision verification and refinement loop.
//!
//! ```text
//! c  = captions(v)
//! y0 = decide(v, x);           if text_ok(c, y0) return y0          (line 3)
//! ft = text_feedback(c, y0)
//! for i in 1..=I:
//!     yi = decide(v, x, ft);   v' = edit(yi, v)
//!     if vision_ok(v, v')      return yi                            (line 12)
//!     fv = vision_feedback(v, v')
//!     yi = decide(v, x, fv);   if text_ok(c, yi) return yi          (line 17)
//!     ft = text_feedback(c, yi)
//! return yi  (iteration limit)
//! ```

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agents::{Agents, Feedback, Modality, Response, Verdict};
use crate::error::{invalid, Error, Result};
use crate::scene::{derive_captions, CaptionSet, Fact, Scene};
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrchestratorConfig {
    pub max_iterations: usize,
    pub gamma_clip: f64,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            max_iterations: 4,
            gamma_clip: 0.9,
        }
    }
}

impl OrchestratorConfig {
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.max_iterations == 0 {
            return Err(("max_iterations", "must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma_clip) {
            return Err(("gamma_clip", "must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(field, msg)| invalid(format!("orchestrator.{field}: {msg}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepLabel {
    Init,
    InitialGeneration,
    TextVerify,
    TextFeedback,
    DecisionText,
    ImageEdit,
    VisionVerify,
    VisionFeedback,
    DecisionVision,
}

impl StepLabel {
    pub fn is_decision(self) -> bool {
        matches!(
            self,
            StepLabel::InitialGeneration | StepLabel::DecisionText | StepLabel::DecisionVision
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub step: StepLabel,
    pub iteration: usize,
    pub payload: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// Accepted by a verifier at the given line of the loop (3, 12 or 17).
    Accepted {
        line: u32,
        verifier: Modality,
    },
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub scene: Scene,
    pub query: Vec<TokenId>,
    pub config: OrchestratorConfig,
    pub events: Vec<Event>,
    /// `None` only for aborted runs.
    pub outcome: Option<Outcome>,
    pub final_response: Option<Response>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header {
        scene: Scene,
        query: Vec<TokenId>,
        config: OrchestratorConfig,
    },
    Event(Event),
    Summary {
        outcome: Option<Outcome>,
        final_response: Option<Response>,
        decision_calls: usize,
    },
}

impl Transcript {
    pub fn count(&self, step: StepLabel) -> usize {
        self.events.iter().filter(|e| e.step == step).count()
    }

    pub fn decision_calls(&self) -> usize {
        self.events.iter().filter(|e| e.step.is_decision()).count()
    }

    /// Header line, one line per event, then a summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |r: &Record| {
            out.push_str(&serde_json::to_string(r).expect("transcript serializes"));
            out.push('\n');
        };
        push(&Record::Header {
            scene: self.scene.clone(),
            query: self.query.clone(),
            config: self.config.clone(),
        });
        for e in &self.events {
            push(&Record::Event(e.clone()));
        }
        push(&Record::Summary {
            outcome: self.outcome,
            final_response: self.final_response.clone(),
            decision_calls: self.decision_calls(),
        });
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut header = None;
        let mut events = Vec::new();
        let mut summary = None;
        for (i, line) in text.lines().enumerate() {
            let parse_err = |message: String| Error::Parse { line: i + 1, message };
            if line.trim().is_empty() {
                continue;
            }
            if summary.is_some() {
                return Err(parse_err("record after summary".into()));
            }
            match serde_json::from_str::<Record>(line).map_err(|e| parse_err(e.to_string()))? {
                Record::Header { scene, query, config } if header.is_none() && events.is_empty() => {
                    header = Some((scene, query, config))
                }
                Record::Header { .. } => return Err(parse_err("unexpected header".into())),
                Record::Event(_) if header.is_none() => return Err(parse_err("event before header".into())),
                Record::Event(e) => events.push(e),
                Record::Summary {
                    outcome,
                    final_response,
                    ..
                } => summary = Some((outcome, final_response)),
            }
        }
        let (scene, query, config) = header.ok_or_else(|| Error::Parse {
            line: 1,
            message: "missing header".into(),
        })?;
        let (outcome, final_response) = summary.ok_or_else(|| Error::Parse {
            line: text.lines().count().max(1),
            message: "missing summary".into(),
        })?;
        Ok(Self {
            scene,
            query,
            config,
            events,
            outcome,
            final_response,
        })
    }
}

/// An agent failed; the transcript holds every event before the failure.
#[derive(Debug)]
pub struct Aborted {
    pub error: Error,
    pub transcript: Box<Transcript>,
}

impl fmt::Display for Aborted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "run aborted after {} events: {}",
            self.transcript.events.len(),
            self.error
        )
    }
}

impl std::error::Error for Aborted {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

struct Run<'a> {
    agents: Agents<'a>,
    scene: &'a Scene,
    query: &'a [TokenId],
    captions: &'a CaptionSet,
    transcript: Transcript,
    rejected: BTreeSet<Fact>,
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("payload serializes")
}

impl Run<'_> {
    fn log(&mut self, step: StepLabel, iteration: usize, payload: Value) {
        self.transcript.events.push(Event {
            step,
            iteration,
            payload,
        });
    }

    fn decide(&mut self, step: StepLabel, iteration: usize, feedback: Option<&Feedback>) -> Result<Response> {
        let r = self.agents.decision.generate(self.scene, self.query, feedback)?;
        self.log(step, iteration, to_value(&r));
        Ok(r)
    }

    fn text_verify(&mut self, iteration: usize, response: &Response) -> Verdict {
        let v = self.agents.text.verify(self.captions, response);
        self.log(StepLabel::TextVerify, iteration, to_value(&v));
        v
    }

    fn feedback(
        &mut self,
        step: StepLabel,
        iteration: usize,
        source: Modality,
        verdict: &Verdict,
        response: &Response,
    ) -> Feedback {
        for e in verdict.rejections() {
            if response.facts.contains(&e.fact) {
                self.rejected.insert(e.fact.clone());
            }
        }
        let fb = Feedback {
            source,
            round: self.transcript.decision_calls(),
            response: response.clone(),
            evidence: verdict.evidence.clone(),
            rejected: self.rejected.clone(),
        };
        self.log(
            step,
            iteration,
            json!({ "evidence": fb.evidence, "rejected": fb.rejected }),
        );
        fb
    }

    fn finish(&mut self, response: Response, outcome: Outcome) {
        self.transcript.outcome = Some(outcome);
        self.transcript.final_response = Some(response);
    }

    fn run(&mut self) -> Result<()> {
        let cfg = self.transcript.config.clone();
        self.log(StepLabel::Init, 0, json!({ "captions": self.captions.captions }));
        let y0 = self.decide(StepLabel::InitialGeneration, 0, None)?;
        let verdict = self.text_verify(0, &y0);
        if verdict.supported {
            self.finish(
                y0,
                Outcome::Accepted {
                    line: 3,
                    verifier: Modality::Text,
                },
            );
            return Ok(());
        }
        let mut ft = self.feedback(StepLabel::TextFeedback, 0, Modality::Text, &verdict, &y0);
        let mut last = y0;
        for i in 1..=cfg.max_iterations {
            let yi = self.decide(StepLabel::DecisionText, i, Some(&ft))?;
            let edited = self.agents.edit.edit(&yi, self.scene)?;
            self.log(StepLabel::ImageEdit, i, json!({ "scene": edited }));
            let vv = self.agents.vision.verify(self.scene, &edited, cfg.gamma_clip);
            self.log(StepLabel::VisionVerify, i, to_value(&vv));
            if vv.supported {
                self.finish(
                    yi,
                    Outcome::Accepted {
                        line: 12,
                        verifier: Modality::Vision,
                    },
                );
                return Ok(());
            }
            let fv = self.feedback(StepLabel::VisionFeedback, i, Modality::Vision, &vv, &yi);
            let yi = self.decide(StepLabel::DecisionVision, i, Some(&fv))?;
            let tv = self.text_verify(i, &yi);
            if tv.supported {
                self.finish(
                    yi,
                    Outcome::Accepted {
                        line: 17,
                        verifier: Modality::Text,
                    },
                );
                return Ok(());
            }
            ft = self.feedback(StepLabel::TextFeedback, i, Modality::Text, &tv, &yi);
            last = yi;
        }
        self.finish(last, Outcome::IterationLimit);
        Ok(())
    }
}

/// Runs the loop with captions derived from the scene.
pub fn run_inex(
    scene: &Scene,
    query: &[TokenId],
    agents: Agents<'_>,
    cfg: &OrchestratorConfig,
) -> std::result::Result<Transcript, Aborted> {
    run_inex_with_captions(scene, query, &derive_captions(scene), agents, cfg)
}

/// Runs the loop against externally supplied captions.
pub fn run_inex_with_captions(
    scene: &Scene,
    query: &[TokenId],
    captions: &CaptionSet,
    agents: Agents<'_>,
    cfg: &OrchestratorConfig,
) -> std::result::Result<Transcript, Aborted> {
    let mut run = Run {
        agents,
        scene,
        query,
        captions,
        transcript: Transcript {
            scene: scene.clone(),
            query: query.to_vec(),
            config: cfg.clone(),
            events: Vec::new(),
            outcome: None,
            final_response: None,
        },
        rejected: BTreeSet::new(),
    };
    let result = cfg.validate().and_then(|()| run.run());
    match result {
        Ok(()) => Ok(run.transcript),
        Err(error) => Err(Aborted {
            error,
            transcript: Box::new(run.transcript),
        }),
    }
}

/// Re-runs the recorded inputs and compares the serialized transcripts.
pub fn replay(transcript: &Transcript, agents: Agents<'_>) -> Result<bool> {
    let rerun =
        run_inex(&transcript.scene, &transcript.query, agents, &transcript.config).map_err(|a| match a.error {
            Error::Replay(m) => Error::Replay(m),
            other => Error::Replay(other.to_string()),
        })?;
    Ok(rerun.to_jsonl() == transcript.to_jsonl())
}

/// Whether the verifier that accepted the final response accepts it again.
/// Runs that hit the iteration limit have no accepting verifier.
pub fn reverify(transcript: &Transcript, agents: Agents<'_>) -> Result<Option<bool>> {
    let (Some(outcome), Some(resp)) = (transcript.outcome, &transcript.final_response) else {
        return Ok(None);
    };
    match outcome {
        Outcome::IterationLimit => Ok(None),
        Outcome::Accepted {
            verifier: Modality::Text,
            ..
        } => {
            let caps = derive_captions(&transcript.scene);
            Ok(Some(agents.text.verify(&caps, resp).supported))
        }
        Outcome::Accepted {
            verifier: Modality::Vision,
            ..
        } => {
            let edited = agents.edit.edit(resp, &transcript.scene)?;
            let v = agents
                .vision
                .verify(&transcript.scene, &edited, transcript.config.gamma_clip);
            Ok(Some(v.supported))
        }
    }
}

/// Checks that the event sequence is a path through the loop's control
/// flow and that the outcome matches where it stopped.
pub fn check_control_flow(t: &Transcript) -> std::result::Result<(), String> {
    use StepLabel::*;
    let steps: Vec<(StepLabel, usize)> = t.events.iter().map(|e| (e.step, e.iteration)).collect();
    let supported = |k: usize| {
        t.events[k]
            .payload
            .get("supported")
            .and_then(Value::as_bool)
            .unwrap_or(false)
    };
    let expect = |k: usize, step: StepLabel, it: usize| -> std::result::Result<(), String> {
        match steps.get(k) {
            Some(&(s, i)) if s == step && i == it => Ok(()),
            other => Err(format!("event {k}: expected {step:?}@{it}, found {other:?}")),
        }
    };
    expect(0, Init, 0)?;
    expect(1, InitialGeneration, 0)?;
    expect(2, TextVerify, 0)?;
    let done = |k: usize, outcome: Outcome| -> std::result::Result<(), String> {
        if steps.len() != k {
            return Err(format!("{} events after acceptance", steps.len() - k));
        }
        if t.outcome != Some(outcome) {
            return Err(format!("outcome {:?}, expected {outcome:?}", t.outcome));
        }
        Ok(())
    };
    if supported(2) {
        return done(
            3,
            Outcome::Accepted {
                line: 3,
                verifier: Modality::Text,
            },
        );
    }
    expect(3, TextFeedback, 0)?;
    let mut k = 4;
    for i in 1..=t.config.max_iterations {
        for (off, step) in [DecisionText, ImageEdit, VisionVerify].into_iter().enumerate() {
            expect(k + off, step, i)?;
        }
        if supported(k + 2) {
            return done(
                k + 3,
                Outcome::Accepted {
                    line: 12,
                    verifier: Modality::Vision,
                },
            );
        }
        for (off, step) in [VisionFeedback, DecisionVision, TextVerify].into_iter().enumerate() {
            expect(k + 3 + off, step, i)?;
        }
        if supported(k + 5) {
            return done(
                k + 6,
                Outcome::Accepted {
                    line: 17,
                    verifier: Modality::Text,
                },
            );
        }
        expect(k + 6, TextFeedback, i)?;
        k += 7;
    }
    done(k, Outcome::IterationLimit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{
        DeferringDecisionAgent, ReflectionConfig, SceneEditAgent, ScriptEntry, ScriptedDecisionAgent, TextReflector,
        VisionReflector,
    };
    use crate::scene::{AttrSlot, SceneObject};
    use crate::vocab::{self, Slot};

    fn scene() -> Scene {
        Scene::new(vec![
            SceneObject::new(0, "dog", [0, 0]).with(AttrSlot::Color, "red"),
            SceneObject::new(1, "car", [2, 3]),
        ])
        .unwrap()
    }

    fn query() -> Vec<TokenId> {
        vec![vocab::Q_DESCRIBE, vocab::SEP]
    }

    fn entry(round: usize, facts: Vec<Fact>) -> ScriptEntry {
        ScriptEntry {
            query: query(),
            round,
            response: Response::from_facts(facts, &query()),
        }
    }

    fn run_with(decision: &dyn crate::agents::DecisionAgent, max_iterations: usize) -> Transcript {
        let text = TextReflector::new(ReflectionConfig::default());
        let agents = Agents {
            decision,
            text: &text,
            edit: &SceneEditAgent,
            vision: &VisionReflector,
        };
        let cfg = OrchestratorConfig {
            max_iterations,
            ..OrchestratorConfig::default()
        };
        run_inex(&scene(), &query(), agents, &cfg).unwrap()
    }

    #[test]
    fn grounded_answer_exits_at_line_3() {
        let agent = ScriptedDecisionAgent::new(vec![entry(0, vec![Fact::exists("dog")])]);
        let t = run_with(&agent, 4);
        assert_eq!(
            t.outcome,
            Some(Outcome::Accepted {
                line: 3,
                verifier: Modality::Text
            })
        );
        let steps: Vec<StepLabel> = t.events.iter().map(|e| e.step).collect();
        assert_eq!(
            steps,
            [StepLabel::Init, StepLabel::InitialGeneration, StepLabel::TextVerify]
        );
        assert_eq!(t.decision_calls(), 1);
        check_control_flow(&t).unwrap();
    }

    #[test]
    fn fixed_answer_exits_at_line_12() {
        let agent = ScriptedDecisionAgent::new(vec![
            entry(0, vec![Fact::exists("cat")]),
            entry(1, vec![Fact::exists("dog")]),
        ]);
        let t = run_with(&agent, 4);
        assert_eq!(
            t.outcome,
            Some(Outcome::Accepted {
                line: 12,
                verifier: Modality::Vision
            })
        );
        assert_eq!(t.decision_calls(), 2);
        assert_eq!(t.final_response.as_ref().unwrap().facts, vec![Fact::exists("dog")]);
        check_control_flow(&t).unwrap();
    }

    #[test]
    fn adversary_hits_iteration_limit() {
        let bad = vec![Fact::exists("cat"), Fact::exists("horse")];
        let entries = (0..=8).map(|r| entry(r, bad.clone())).collect();
        let agent = ScriptedDecisionAgent::new(entries);
        let t = run_with(&agent, 4);
        assert_eq!(t.outcome, Some(Outcome::IterationLimit));
        assert_eq!(t.decision_calls(), 9);
        assert_eq!(t.count(StepLabel::ImageEdit), 4);
        assert_eq!(t.count(StepLabel::VisionVerify), 4);
        assert_eq!(t.count(StepLabel::TextVerify), 5);
        // init, y0, verify, feedback, then 7 events per iteration
        assert_eq!(t.events.len(), 4 + 7 * 4);
        check_control_flow(&t).unwrap();
    }

    #[test]
    fn deferring_agent_converges_and_never_regresses() {
        let wrong = vec![
            Fact::exists("dog"),
            Fact::new("dog", Slot::Color, "blue"),
            Fact::exists("cat"),
        ];
        let agent = DeferringDecisionAgent {
            inner: ScriptedDecisionAgent::new(vec![entry(0, wrong)]),
        };
        let t = run_with(&agent, 4);
        assert!(matches!(t.outcome, Some(Outcome::Accepted { .. })));
        let caps = derive_captions(&scene());
        let unsupported: Vec<usize> = t
            .events
            .iter()
            .filter(|e| e.step.is_decision())
            .map(|e| {
                let r: Response = serde_json::from_value(e.payload.clone()).unwrap();
                r.facts.iter().filter(|f| !caps.supports(f)).count()
            })
            .collect();
        assert!(unsupported.windows(2).all(|w| w[1] < w[0]), "{unsupported:?}");
    }

    #[test]
    fn missing_script_entry_aborts_with_partial_transcript() {
        let agent = ScriptedDecisionAgent::new(vec![entry(0, vec![Fact::exists("cat")])]);
        let text = TextReflector::new(ReflectionConfig::default());
        let agents = Agents {
            decision: &agent,
            text: &text,
            edit: &SceneEditAgent,
            vision: &VisionReflector,
        };
        let err = run_inex(&scene(), &query(), agents, &OrchestratorConfig::default()).unwrap_err();
        assert!(matches!(err.error, Error::Replay(_)));
        assert_eq!(err.transcript.events.len(), 4);
        assert!(err.transcript.outcome.is_none());
    }

    #[test]
    fn transcript_roundtrip_and_replay() {
        let agent = ScriptedDecisionAgent::new(vec![
            entry(0, vec![Fact::exists("cat")]),
            entry(1, vec![Fact::exists("dog"), Fact::exists("horse")]),
            entry(2, vec![Fact::exists("dog")]),
        ]);
        let t = run_with(&agent, 4);
        assert_eq!(
            t.outcome,
            Some(Outcome::Accepted {
                line: 17,
                verifier: Modality::Text
            })
        );
        let text = t.to_jsonl();
        assert_eq!(text.lines().count(), t.events.len() + 2);
        let back = Transcript::from_jsonl(&text).unwrap();
        assert_eq!(back, t);

        let reflector = TextReflector::new(ReflectionConfig::default());
        let agents = Agents {
            decision: &agent,
            text: &reflector,
            edit: &SceneEditAgent,
            vision: &VisionReflector,
        };
        assert!(replay(&back, agents).unwrap());
        assert_eq!(reverify(&back, agents).unwrap(), Some(true));

        let mut altered = agent.clone();
        altered.entries[2]
            .response
            .facts
            .push(Fact::new("dog", Slot::Color, "red"));
        let agents = Agents {
            decision: &altered,
            ..agents
        };
        assert!(!replay(&back, agents).unwrap());
    }

    #[test]
    fn malformed_transcripts_report_lines() {
        assert!(matches!(Transcript::from_jsonl(""), Err(Error::Parse { line: 1, .. })));
        let err = Transcript::from_jsonl("{\"record\":\"event\",\"step\":\"init\",\"iteration\":0,\"payload\":null}\n")
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        assert!(matches!(
            Transcript::from_jsonl("not json"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn config_validation() {
        let bad = OrchestratorConfig {
            max_iterations: 0,
            ..OrchestratorConfig::default()
        };
        assert!(bad
            .validate()
            .unwrap_err()
            .to_string()
            .contains("orchestrator.max_iterations"));
        let bad = OrchestratorConfig {
            gamma_clip: 1.5,
            ..OrchestratorConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
