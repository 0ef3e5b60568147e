use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    aggregate_votes, Evidence, EvidenceTag, Perspective, PerspectiveVote, ReflectionConfig, Response, TextReflection,
    Verdict, VisionReflection,
};
use crate::par::{self, Execution};
use crate::scene::{scene_similarity, CaptionSet, Fact, Scene};
use crate::vocab::Slot;

/// Checks one fact against the captions. A rejected fact whose subject and
/// slot are captioned with another value is a conflict and comes with the
/// grounded values as corrections; otherwise it is missing.
fn judge(captions: &CaptionSet, fact: &Fact) -> Vec<Evidence> {
    if captions.supports(fact) {
        return vec![Evidence::new(fact.clone(), EvidenceTag::Agree)];
    }
    let present = captions.count_of(&fact.subject) > 0;
    let corrections: Vec<Fact> = match fact.slot {
        Slot::Exists if present => vec![Fact::exists(&fact.subject)],
        Slot::Exists => vec![],
        Slot::Count if present => vec![Fact::new(
            &fact.subject,
            Slot::Count,
            captions.count_of(&fact.subject).to_string(),
        )],
        Slot::Count => vec![],
        Slot::Color | Slot::Action => {
            let mut seen: Vec<Fact> = Vec::new();
            for c in &captions.captions {
                if c.subject == fact.subject && c.slot == fact.slot && !seen.contains(c) {
                    seen.push(c.clone());
                }
            }
            seen
        }
    };
    if corrections.is_empty() {
        return vec![Evidence::new(fact.clone(), EvidenceTag::Missing)];
    }
    let mut out = vec![Evidence::new(fact.clone(), EvidenceTag::Conflict)];
    out.extend(
        corrections
            .into_iter()
            .map(|f| Evidence::new(f, EvidenceTag::Correction)),
    );
    out
}

/// Evidence for every fact covered by `perspectives`, in response order.
pub fn check_facts(captions: &CaptionSet, facts: &[Fact], perspectives: &[Perspective]) -> Vec<Evidence> {
    let mut out: Vec<Evidence> = Vec::new();
    for f in facts {
        if !perspectives.iter().any(|p| p.covers(f.slot)) {
            continue;
        }
        for e in judge(captions, f) {
            if !out.contains(&e) {
                out.push(e);
            }
        }
    }
    out
}

/// Multi-perspective caption checker with a seeded ensemble.
///
/// Each repetition visits the perspectives in a seeded order; the order is
/// the only thing the temperature perturbs, so votes stay deterministic.
#[derive(Debug, Clone, Default)]
pub struct TextReflector {
    pub config: ReflectionConfig,
    pub execution: Execution,
}

impl TextReflector {
    pub fn new(config: ReflectionConfig) -> Self {
        Self {
            config,
            execution: Execution::Sequential,
        }
    }

    fn repetition(&self, rep: usize, captions: &CaptionSet, response: &Response) -> Vec<PerspectiveVote> {
        let mut order = self.config.active_perspectives().to_vec();
        if self.config.temperature > 0.0 {
            let seed = self.config.seed ^ (rep as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        order
            .into_iter()
            .map(|p| {
                let evidence: Vec<Fact> = check_facts(captions, &response.facts, &[p])
                    .into_iter()
                    .filter(Evidence::is_rejection)
                    .map(|e| e.fact)
                    .collect();
                PerspectiveVote {
                    perspective: p,
                    repetition: rep,
                    vote: evidence.is_empty(),
                    evidence,
                }
            })
            .collect()
    }
}

impl TextReflection for TextReflector {
    fn verify(&self, captions: &CaptionSet, response: &Response) -> Verdict {
        let reps: Vec<usize> = (0..self.config.ensemble_size).collect();
        let per_perspective_votes: Vec<PerspectiveVote> =
            par::map(self.execution, &reps, |&r| self.repetition(r, captions, response))
                .into_iter()
                .flatten()
                .collect();
        Verdict {
            supported: aggregate_votes(&per_perspective_votes),
            evidence: check_facts(captions, &response.facts, self.config.active_perspectives()),
            per_perspective_votes,
            similarity: None,
        }
    }
}

/// Compares the original scene with the one edited to match the response.
#[derive(Debug, Clone, Copy, Default)]
pub struct VisionReflector;

impl VisionReflection for VisionReflector {
    fn verify(&self, original: &Scene, edited: &Scene, gamma_clip: f64) -> Verdict {
        let similarity = scene_similarity(original, edited);
        let supported = similarity >= gamma_clip;
        let (fo, fe) = (original.facts(), edited.facts());
        let inserted = fe.difference(&fo).cloned();
        let removed = fo.difference(&fe).cloned();
        let evidence: Vec<Evidence> = inserted
            .map(|f| Evidence::new(f, EvidenceTag::Conflict))
            .chain(removed.map(|f| Evidence::new(f, EvidenceTag::Missing)))
            .collect();
        Verdict {
            supported,
            per_perspective_votes: vec![PerspectiveVote {
                perspective: Perspective::Visual,
                repetition: 0,
                vote: supported,
                evidence: evidence.iter().map(|e| e.fact.clone()).collect(),
            }],
            evidence,
            similarity: Some(similarity),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{derive_captions, tests::arb_scene, AttrSlot, SceneObject};
    use proptest::prelude::*;

    fn dog_scene() -> Scene {
        Scene::new(vec![SceneObject::new(0, "dog", [1, 1]).with(AttrSlot::Color, "red")]).unwrap()
    }

    fn respond(facts: Vec<Fact>) -> Response {
        Response::from_facts(facts, &[])
    }

    #[test]
    fn caption_facts_are_supported() {
        let caps = derive_captions(&dog_scene());
        let v = TextReflector::new(ReflectionConfig::default()).verify(&caps, &respond(caps.captions.clone()));
        assert!(v.supported);
        assert_eq!(v.rejections().count(), 0);
        assert_eq!(v.per_perspective_votes.len(), 12);
    }

    #[test]
    fn missing_cat_is_reported() {
        let caps = derive_captions(&dog_scene());
        let v = TextReflector::new(ReflectionConfig::default()).verify(&caps, &respond(vec![Fact::exists("cat")]));
        assert!(!v.supported);
        assert_eq!(
            v.evidence,
            vec![Evidence::new(Fact::exists("cat"), EvidenceTag::Missing)]
        );
    }

    #[test]
    fn wrong_color_conflicts_with_correction() {
        let caps = derive_captions(&dog_scene());
        let v = TextReflector::new(ReflectionConfig::default())
            .verify(&caps, &respond(vec![Fact::new("dog", Slot::Color, "blue")]));
        assert!(!v.supported);
        assert_eq!(
            v.evidence,
            vec![
                Evidence::new(Fact::new("dog", Slot::Color, "blue"), EvidenceTag::Conflict),
                Evidence::new(Fact::new("dog", Slot::Color, "red"), EvidenceTag::Correction),
            ]
        );
    }

    #[test]
    fn uncovered_perspectives_are_not_checked() {
        let caps = derive_captions(&dog_scene());
        let cfg = ReflectionConfig {
            perspectives: 1,
            ..ReflectionConfig::default()
        };
        let v = TextReflector::new(cfg).verify(&caps, &respond(vec![Fact::new("dog", Slot::Count, "3")]));
        assert!(v.supported);
    }

    #[test]
    fn vision_examples() {
        let s = dog_scene();
        let v = VisionReflector.verify(&s, &s, 0.9);
        assert!(v.supported);
        assert_eq!(v.similarity, Some(1.0));

        let one = Scene::new(vec![SceneObject::new(0, "dog", [0, 0])]).unwrap();
        let two = Scene::new(vec![
            SceneObject::new(0, "dog", [0, 0]),
            SceneObject::new(1, "cat", [1, 0]),
        ])
        .unwrap();
        let v = VisionReflector.verify(&one, &two, 0.9);
        assert!(!v.supported);
        assert_eq!(v.similarity, Some(0.5));
        assert_eq!(
            v.evidence,
            vec![Evidence::new(Fact::exists("cat"), EvidenceTag::Conflict)]
        );
        assert!(VisionReflector.verify(&one, &two, 0.5).supported);
    }

    fn arb_facts() -> impl Strategy<Value = Vec<Fact>> {
        let fact = (0usize..4, 0usize..4, 0usize..4).prop_map(|(c, slot, v)| {
            let subject = ["dog", "cat", "car", "person"][c];
            match slot {
                0 => Fact::exists(subject),
                1 => Fact::new(subject, Slot::Color, ["red", "blue", "green", "white"][v]),
                2 => Fact::new(subject, Slot::Action, ["sitting", "running", "standing", "eating"][v]),
                _ => Fact::new(subject, Slot::Count, (v + 1).to_string()),
            }
        });
        prop::collection::vec(fact, 0..6)
    }

    proptest! {
        #[test]
        fn ensemble_matches_single_pass_checker(
            scene in arb_scene(),
            facts in arb_facts(),
            seed in any::<u64>(),
            ensemble in 1usize..5,
        ) {
            let caps = derive_captions(&scene);
            let cfg = ReflectionConfig { seed, ensemble_size: ensemble, ..ReflectionConfig::default() };
            let v = TextReflector::new(cfg.clone()).verify(&caps, &respond(facts.clone()));
            let brute = facts.iter().all(|f| caps.supports(f));
            prop_assert_eq!(v.supported, brute);
            let again = TextReflector { config: cfg, execution: Execution::Parallel }
                .verify(&caps, &respond(facts));
            prop_assert_eq!(again, v);
        }

        #[test]
        fn vision_verdict_is_threshold_comparison(a in arb_scene(), b in arb_scene(), g in 0.0f64..=1.0) {
            let v = VisionReflector.verify(&a, &b, g);
            let (fa, fb) = (a.facts(), b.facts());
            let union = fa.union(&fb).count();
            let jac = if union == 0 { 1.0 } else { fa.intersection(&fb).count() as f64 / union as f64 };
            prop_assert_eq!(v.supported, jac >= g);
        }
    }
}
