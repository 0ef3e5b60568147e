//! Model-driven verification loop over a seeded corpus: transcripts survive
//! a JSONL round trip, replay identically and respect the control flow.

use inex_core::agents::{Agents, ModelDecisionAgent, ReflectionConfig, SceneEditAgent, TextReflector, VisionReflector};
use inex_core::eval::{biased_model, generate_corpus, Setting};
use inex_core::introspection::IntrospectionConfig;
use inex_core::model::{ModelConfig, ModelWeights};
use inex_core::orchestrator::{check_control_flow, replay, reverify, run_inex, OrchestratorConfig, Transcript};

fn with_agents<T>(w: &ModelWeights, f: impl FnOnce(Agents<'_>) -> T) -> T {
    let decision = ModelDecisionAgent::new(w, IntrospectionConfig::default());
    let text = TextReflector::new(ReflectionConfig::default());
    f(Agents {
        decision: &decision,
        text: &text,
        edit: &SceneEditAgent,
        vision: &VisionReflector,
    })
}

#[test]
fn transcripts_roundtrip_replay_and_reverify() {
    let w = biased_model(&ModelConfig::default()).unwrap();
    let cfg = OrchestratorConfig::default();
    for setting in [Setting::Random, Setting::Popular, Setting::Adversarial] {
        for item in generate_corpus(8, setting, 21).unwrap() {
            let t = with_agents(&w, |a| run_inex(&item.scene, &item.query, a, &cfg)).unwrap();
            check_control_flow(&t).unwrap();
            let text = t.to_jsonl();
            let back = Transcript::from_jsonl(&text).unwrap();
            assert_eq!(back.to_jsonl(), text);
            assert!(with_agents(&w, |a| replay(&back, a)).unwrap());
            assert_ne!(with_agents(&w, |a| reverify(&back, a)).unwrap(), Some(false));
        }
    }
}

#[test]
fn weights_survive_binary_roundtrip() {
    let w = biased_model(&ModelConfig::default()).unwrap();
    let bytes = w.to_bytes();
    assert_eq!(&bytes[..8], b"TOYMLLM1");
    let back = ModelWeights::read_from(bytes.as_slice()).unwrap();
    assert_eq!(back, w);
    assert_eq!(back.checksum(), w.checksum());
    assert!(ModelWeights::read_from(&bytes[..bytes.len() - 1]).is_err());
}
