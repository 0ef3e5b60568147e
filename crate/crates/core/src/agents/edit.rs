use std::collections::BTreeSet;

use super::{EditAgent, Response};
use crate::error::{Error, Result};
use crate::scene::{apply_edit, AttrSlot, EditOp, Fact, Scene, SceneEdit, SceneObject, GRID_SIZE};
use crate::vocab::{self, Slot};

struct Builder {
    scene: Scene,
    ops: Vec<EditOp>,
    /// Objects whose attribute in a slot was fixed by an earlier fact.
    claimed: BTreeSet<(u32, AttrSlot)>,
}

impl Builder {
    fn push(&mut self, op: EditOp) -> Result<()> {
        self.scene = apply_edit(&self.scene, &SceneEdit::new(vec![op.clone()]))?;
        self.ops.push(op);
        Ok(())
    }

    fn free_cell(&self) -> [i32; 2] {
        let taken: BTreeSet<[i32; 2]> = self.scene.objects().iter().map(|o| o.pos).collect();
        (0..GRID_SIZE)
            .flat_map(|y| (0..GRID_SIZE).map(move |x| [x, y]))
            .find(|p| !taken.contains(p))
            .unwrap_or([0, 0])
    }

    fn insert(&mut self, category: &str, attr: Option<(AttrSlot, &str)>) -> Result<u32> {
        let id = self.scene.next_id();
        let mut object = SceneObject::new(id, category, self.free_cell());
        if let Some((slot, value)) = attr {
            object = object.with(slot, value);
        }
        self.push(EditOp::Insert { object })?;
        Ok(id)
    }

    fn ids_of(&self, category: &str) -> Vec<u32> {
        self.scene
            .objects()
            .iter()
            .filter(|o| o.category == category)
            .map(|o| o.id)
            .collect()
    }

    fn set_attribute(&mut self, category: &str, slot: AttrSlot, value: &str) -> Result<()> {
        let holder = self
            .scene
            .objects()
            .iter()
            .find(|o| o.category == category && o.attributes.get(&slot).is_some_and(|v| v == value));
        if let Some(o) = holder {
            self.claimed.insert((o.id, slot));
            return Ok(());
        }
        let free = self
            .ids_of(category)
            .into_iter()
            .find(|id| !self.claimed.contains(&(*id, slot)));
        let id = match free {
            Some(id) => {
                self.push(EditOp::SetAttribute {
                    id,
                    slot,
                    value: value.to_string(),
                })?;
                id
            }
            None => self.insert(category, Some((slot, value)))?,
        };
        self.claimed.insert((id, slot));
        Ok(())
    }

    fn set_count(&mut self, category: &str, n: usize) -> Result<()> {
        let mut ids = self.ids_of(category);
        while ids.len() < n {
            ids.push(self.insert(category, None)?);
        }
        // drop unclaimed objects first, newest first
        ids.sort_by_key(|id| (self.claimed.iter().any(|(c, _)| c == id), std::cmp::Reverse(*id)));
        for id in ids.into_iter().take(self.ids_of(category).len().saturating_sub(n)) {
            self.push(EditOp::Remove { id })?;
        }
        Ok(())
    }
}

fn check(fact: &Fact) -> Result<()> {
    if !vocab::is_category(&fact.subject) {
        return Err(Error::InvalidEdit(format!("unknown category '{}'", fact.subject)));
    }
    if !vocab::valid_value(fact.slot, &fact.value) {
        return Err(Error::InvalidEdit(format!(
            "unknown {} value '{}' for {}",
            fact.slot, fact.value, fact.subject
        )));
    }
    Ok(())
}

/// Builds the edit that makes `scene` satisfy the response's facts.
/// Count facts are applied after all others.
pub fn edit_for(response: &Response, scene: &Scene) -> Result<SceneEdit> {
    let mut b = Builder {
        scene: scene.clone(),
        ops: Vec::new(),
        claimed: BTreeSet::new(),
    };
    for fact in &response.facts {
        check(fact)?;
    }
    for fact in response.facts.iter().filter(|f| f.slot != Slot::Count) {
        let c = fact.subject.as_str();
        match fact.slot {
            Slot::Exists if fact.value == "true" => {
                if b.scene.count_of(c) == 0 {
                    b.insert(c, None)?;
                }
            }
            Slot::Exists => {
                for id in b.ids_of(c) {
                    b.push(EditOp::Remove { id })?;
                }
            }
            Slot::Color | Slot::Action => {
                let slot = AttrSlot::from_slot(fact.slot).expect("attribute slot");
                b.set_attribute(c, slot, &fact.value)?;
            }
            Slot::Count => unreachable!(),
        }
    }
    for fact in response.facts.iter().filter(|f| f.slot == Slot::Count) {
        let n: usize = fact.value.parse().expect("validated count");
        b.set_count(&fact.subject, n)?;
    }
    Ok(SceneEdit::new(b.ops))
}

/// Symbolic stand-in for an image editor.
#[derive(Debug, Clone, Copy, Default)]
pub struct SceneEditAgent;

impl EditAgent for SceneEditAgent {
    fn edit(&self, response: &Response, scene: &Scene) -> Result<Scene> {
        apply_edit(scene, &edit_for(response, scene)?)
    }
}
