//! Synthetic scenes standing in for images: scene graphs, grounded dense
//! captions, symbolic edits and fact-set similarity.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::vocab::{self, Slot};

/// Scene positions live on a `GRID_SIZE × GRID_SIZE` integer grid.
pub const GRID_SIZE: i32 = 8;

/// Attribute slots an object can carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrSlot {
    Color,
    Action,
}

impl AttrSlot {
    pub fn slot(self) -> Slot {
        match self {
            AttrSlot::Color => Slot::Color,
            AttrSlot::Action => Slot::Action,
        }
    }

    pub fn from_slot(slot: Slot) -> Option<Self> {
        match slot {
            Slot::Color => Some(AttrSlot::Color),
            Slot::Action => Some(AttrSlot::Action),
            _ => None,
        }
    }
}

/// A `(subject category, slot, value)` statement about a scene.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub subject: String,
    pub slot: Slot,
    pub value: String,
}

impl Fact {
    pub fn new(subject: impl Into<String>, slot: Slot, value: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            slot,
            value: value.into(),
        }
    }

    pub fn exists(subject: impl Into<String>) -> Self {
        Self::new(subject, Slot::Exists, "true")
    }

    /// Whether subject and value belong to the closed vocabulary.
    pub fn is_well_formed(&self) -> bool {
        vocab::is_category(&self.subject) && vocab::valid_value(self.slot, &self.value)
    }
}

impl fmt::Display for Fact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.subject, self.slot, self.value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub category: String,
    #[serde(default)]
    pub attributes: BTreeMap<AttrSlot, String>,
    pub pos: [i32; 2],
}

impl SceneObject {
    pub fn new(id: u32, category: impl Into<String>, pos: [i32; 2]) -> Self {
        Self {
            id,
            category: category.into(),
            attributes: BTreeMap::new(),
            pos,
        }
    }

    pub fn with(mut self, slot: AttrSlot, value: impl Into<String>) -> Self {
        self.attributes.insert(slot, value.into());
        self
    }

    fn validate(&self) -> Result<()> {
        if !vocab::is_category(&self.category) {
            return Err(invalid(format!("unknown category '{}'", self.category)));
        }
        for (slot, value) in &self.attributes {
            if !vocab::valid_value(slot.slot(), value) {
                return Err(invalid(format!("unknown {} value '{value}'", slot.slot())));
            }
        }
        let in_grid = |c: i32| (0..GRID_SIZE).contains(&c);
        if !in_grid(self.pos[0]) || !in_grid(self.pos[1]) {
            return Err(invalid(format!(
                "object {} position {:?} outside the {GRID_SIZE}x{GRID_SIZE} grid",
                self.id, self.pos
            )));
        }
        Ok(())
    }
}

/// A scene graph. Objects are kept sorted by id.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "RawScene", into = "RawScene")]
pub struct Scene {
    objects: Vec<SceneObject>,
}

#[derive(Serialize, Deserialize)]
struct RawScene {
    objects: Vec<SceneObject>,
}

impl TryFrom<RawScene> for Scene {
    type Error = Error;

    fn try_from(raw: RawScene) -> Result<Self> {
        Scene::new(raw.objects)
    }
}

impl From<Scene> for RawScene {
    fn from(s: Scene) -> Self {
        RawScene { objects: s.objects }
    }
}

impl Scene {
    pub fn new(mut objects: Vec<SceneObject>) -> Result<Self> {
        objects.sort_by_key(|o| o.id);
        for pair in objects.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(invalid(format!("duplicate object id {}", pair[0].id)));
            }
        }
        for o in &objects {
            o.validate()?;
        }
        Ok(Self { objects })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn objects(&self) -> &[SceneObject] {
        &self.objects
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn next_id(&self) -> u32 {
        self.objects.last().map_or(0, |o| o.id + 1)
    }

    /// Distinct categories present, sorted.
    pub fn categories(&self) -> BTreeSet<String> {
        self.objects.iter().map(|o| o.category.clone()).collect()
    }

    pub fn count_of(&self, category: &str) -> usize {
        self.objects.iter().filter(|o| o.category == category).count()
    }

    /// The fact set used for similarity: existence plus every attribute.
    pub fn facts(&self) -> BTreeSet<Fact> {
        derive_captions(self).captions.into_iter().collect()
    }

    /// Whether the scene makes `fact` true.
    pub fn entails(&self, fact: &Fact) -> bool {
        match fact.slot {
            Slot::Exists => match fact.value.as_str() {
                "true" => self.count_of(&fact.subject) > 0,
                "false" => self.count_of(&fact.subject) == 0,
                _ => false,
            },
            Slot::Count => fact
                .value
                .parse::<usize>()
                .is_ok_and(|n| n == self.count_of(&fact.subject)),
            Slot::Color | Slot::Action => {
                let attr = AttrSlot::from_slot(fact.slot).expect("attribute slot");
                self.objects
                    .iter()
                    .any(|o| o.category == fact.subject && o.attributes.get(&attr).is_some_and(|v| *v == fact.value))
            }
        }
    }
}

/// Grounded dense captions: one existence triple per object plus one triple
/// per attribute, ordered by object id then slot.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CaptionSet {
    pub captions: Vec<Fact>,
}

impl CaptionSet {
    pub fn new(captions: Vec<Fact>) -> Self {
        Self { captions }
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn contains(&self, fact: &Fact) -> bool {
        self.captions.contains(fact)
    }

    /// Number of existence captions for `category`, i.e. its object count.
    pub fn count_of(&self, category: &str) -> usize {
        self.captions
            .iter()
            .filter(|f| f.slot == Slot::Exists && f.subject == category)
            .count()
    }

    /// Whether the captions support `fact`. Count facts are checked against
    /// the number of existence captions; `exists = false` against their absence.
    pub fn supports(&self, fact: &Fact) -> bool {
        match (fact.slot, fact.value.as_str()) {
            (Slot::Count, v) => v.parse::<usize>().is_ok_and(|n| n == self.count_of(&fact.subject)),
            (Slot::Exists, "false") => self.count_of(&fact.subject) == 0,
            _ => self.contains(fact),
        }
    }
}

pub fn derive_captions(scene: &Scene) -> CaptionSet {
    let mut captions = Vec::new();
    for o in scene.objects() {
        captions.push(Fact::exists(&o.category));
        for (slot, value) in &o.attributes {
            captions.push(Fact::new(&o.category, slot.slot(), value));
        }
    }
    CaptionSet { captions }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditOp {
    Insert { object: SceneObject },
    Remove { id: u32 },
    SetAttribute { id: u32, slot: AttrSlot, value: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SceneEdit {
    pub operations: Vec<EditOp>,
}

impl SceneEdit {
    pub fn new(operations: Vec<EditOp>) -> Self {
        Self { operations }
    }

    pub fn is_empty(&self) -> bool {
        self.operations.is_empty()
    }
}

/// Applies `edit` in order, returning a new scene.
pub fn apply_edit(scene: &Scene, edit: &SceneEdit) -> Result<Scene> {
    let mut objects = scene.objects.clone();
    for op in &edit.operations {
        match op {
            EditOp::Insert { object } => {
                if objects.iter().any(|o| o.id == object.id) {
                    return Err(Error::InvalidEdit(format!("insert of existing id {}", object.id)));
                }
                object.validate().map_err(|e| Error::InvalidEdit(e.to_string()))?;
                objects.push(object.clone());
            }
            EditOp::Remove { id } => {
                let pos = objects
                    .iter()
                    .position(|o| o.id == *id)
                    .ok_or_else(|| Error::InvalidEdit(format!("remove of unknown id {id}")))?;
                objects.remove(pos);
            }
            EditOp::SetAttribute { id, slot, value } => {
                if !vocab::valid_value(slot.slot(), value) {
                    return Err(Error::InvalidEdit(format!("unknown {} value '{value}'", slot.slot())));
                }
                let obj = objects
                    .iter_mut()
                    .find(|o| o.id == *id)
                    .ok_or_else(|| Error::InvalidEdit(format!("set on unknown id {id}")))?;
                obj.attributes.insert(*slot, value.clone());
            }
        }
    }
    Scene::new(objects).map_err(|e| Error::InvalidEdit(e.to_string()))
}

/// Jaccard similarity of the two scenes' fact sets; two empty scenes score 1.
pub fn scene_similarity(a: &Scene, b: &Scene) -> f64 {
    fact_jaccard(&a.facts(), &b.facts())
}

pub(crate) fn fact_jaccard(fa: &BTreeSet<Fact>, fb: &BTreeSet<Fact>) -> f64 {
    let union = fa.union(fb).count();
    if union == 0 {
        return 1.0;
    }
    fa.intersection(fb).count() as f64 / union as f64
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dog_red() -> Scene {
        Scene::new(vec![SceneObject::new(0, "dog", [1, 1]).with(AttrSlot::Color, "red")]).unwrap()
    }

    #[test]
    fn captions_examples() {
        assert!(derive_captions(&Scene::empty()).is_empty());
        let caps = derive_captions(&dog_red());
        assert_eq!(
            caps.captions,
            vec![Fact::exists("dog"), Fact::new("dog", Slot::Color, "red")]
        );
    }

    #[test]
    fn scene_validation() {
        assert!(Scene::new(vec![SceneObject::new(0, "unicorn", [0, 0])]).is_err());
        assert!(Scene::new(vec![SceneObject::new(0, "dog", [8, 0])]).is_err());
        assert!(Scene::new(vec![
            SceneObject::new(1, "dog", [0, 0]),
            SceneObject::new(1, "cat", [1, 0]),
        ])
        .is_err());
        let bad_json = r#"{"objects":[{"id":0,"category":"dog","attributes":{"color":"plaid"},"pos":[0,0]}]}"#;
        assert!(serde_json::from_str::<Scene>(bad_json).is_err());
    }

    #[test]
    fn json_schema() {
        let json = serde_json::to_string(&dog_red()).unwrap();
        assert_eq!(
            json,
            r#"{"objects":[{"id":0,"category":"dog","attributes":{"color":"red"},"pos":[1,1]}]}"#
        );
        let back: Scene = serde_json::from_str(&json).unwrap();
        assert_eq!(back, dog_red());
    }

    #[test]
    fn edit_examples() {
        let s = Scene::new(vec![SceneObject::new(0, "dog", [0, 0])]).unwrap();
        assert_eq!(apply_edit(&s, &SceneEdit::default()).unwrap(), s);

        let cat = SceneObject::new(1, "cat", [2, 2]);
        let ins = SceneEdit::new(vec![EditOp::Insert { object: cat.clone() }]);
        let edited = apply_edit(&s, &ins).unwrap();
        assert_eq!(edited.categories().into_iter().collect::<Vec<_>>(), ["cat", "dog"]);
        assert_eq!(s.len(), 1, "input untouched");

        let both = SceneEdit::new(vec![EditOp::Insert { object: cat }, EditOp::Remove { id: 1 }]);
        assert_eq!(apply_edit(&s, &both).unwrap(), s);

        let bad = SceneEdit::new(vec![EditOp::Remove { id: 9 }]);
        assert!(matches!(apply_edit(&s, &bad), Err(Error::InvalidEdit(_))));
    }

    #[test]
    fn similarity_examples() {
        let dog = Scene::new(vec![SceneObject::new(0, "dog", [0, 0])]).unwrap();
        let dog_cat = Scene::new(vec![
            SceneObject::new(0, "dog", [0, 0]),
            SceneObject::new(1, "cat", [0, 1]),
        ])
        .unwrap();
        assert_eq!(scene_similarity(&dog, &dog), 1.0);
        assert_eq!(scene_similarity(&dog, &dog_cat), 0.5);
        assert_eq!(scene_similarity(&Scene::empty(), &Scene::empty()), 1.0);
        assert_eq!(scene_similarity(&Scene::empty(), &dog), 0.0);
    }

    #[test]
    fn entailment() {
        let s = dog_red();
        assert!(s.entails(&Fact::exists("dog")));
        assert!(!s.entails(&Fact::exists("cat")));
        assert!(s.entails(&Fact::new("cat", Slot::Exists, "false")));
        assert!(s.entails(&Fact::new("dog", Slot::Count, "1")));
        assert!(!s.entails(&Fact::new("dog", Slot::Count, "2")));
        assert!(s.entails(&Fact::new("dog", Slot::Color, "red")));
        assert!(!s.entails(&Fact::new("dog", Slot::Color, "blue")));
    }

    pub(crate) fn arb_scene() -> impl Strategy<Value = Scene> {
        let obj = (
            0..vocab::CATEGORIES.len(),
            prop::option::of(0..vocab::COLORS.len()),
            prop::option::of(0..vocab::ACTIONS.len()),
            0..GRID_SIZE,
            0..GRID_SIZE,
        );
        prop::collection::vec(obj, 0..7).prop_map(|objs| {
            let objects = objs
                .into_iter()
                .enumerate()
                .map(|(i, (c, col, act, x, y))| {
                    let mut o = SceneObject::new(i as u32, vocab::CATEGORIES[c], [x, y]);
                    if let Some(col) = col {
                        o = o.with(AttrSlot::Color, vocab::COLORS[col]);
                    }
                    if let Some(a) = act {
                        o = o.with(AttrSlot::Action, vocab::ACTIONS[a]);
                    }
                    o
                })
                .collect();
            Scene::new(objects).unwrap()
        })
    }

    /// Oracle: explicit intersection/union counting over sorted vectors.
    fn jaccard_oracle(a: &Scene, b: &Scene) -> f64 {
        let mut fa: Vec<Fact> = Vec::new();
        for o in a.objects() {
            fa.push(Fact::exists(&o.category));
            for (s, v) in &o.attributes {
                fa.push(Fact::new(&o.category, s.slot(), v));
            }
        }
        let mut fb: Vec<Fact> = Vec::new();
        for o in b.objects() {
            fb.push(Fact::exists(&o.category));
            for (s, v) in &o.attributes {
                fb.push(Fact::new(&o.category, s.slot(), v));
            }
        }
        fa.sort();
        fa.dedup();
        fb.sort();
        fb.dedup();
        let inter = fa.iter().filter(|f| fb.contains(f)).count();
        let union = fa.len() + fb.len() - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    proptest! {
        #[test]
        fn caption_count_matches_enumeration(s in arb_scene()) {
            let caps = derive_captions(&s);
            let expected: usize = s.objects().iter().map(|o| 1 + o.attributes.len()).sum();
            prop_assert_eq!(caps.len(), expected);
            for c in &caps.captions {
                prop_assert!(s.entails(c));
            }
        }

        #[test]
        fn similarity_matches_set_oracle(a in arb_scene(), b in arb_scene()) {
            let sim = scene_similarity(&a, &b);
            prop_assert_eq!(sim, jaccard_oracle(&a, &b));
            prop_assert_eq!(sim, scene_similarity(&b, &a));
            prop_assert!((0.0..=1.0).contains(&sim));
            prop_assert_eq!(sim == 1.0, a.facts() == b.facts());
        }

        #[test]
        fn self_consistent_edit_keeps_facts(s in arb_scene()) {
            let ops = s
                .objects()
                .iter()
                .flat_map(|o| {
                    o.attributes.iter().map(|(slot, v)| EditOp::SetAttribute {
                        id: o.id,
                        slot: *slot,
                        value: v.clone(),
                    })
                })
                .collect();
            let edited = apply_edit(&s, &SceneEdit::new(ops)).unwrap();
            prop_assert_eq!(scene_similarity(&s, &edited), 1.0);
        }
    }
}
