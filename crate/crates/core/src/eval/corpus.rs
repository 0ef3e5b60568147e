use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scene::{AttrSlot, Scene, SceneObject, GRID_SIZE};
use crate::vocab::{self, TokenId};

/// One yes/no question about a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusItem {
    #[serde(default)]
    pub id: usize,
    pub scene: Scene,
    pub query: Vec<TokenId>,
    pub gold_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hallucination_label: Option<bool>,
}

impl CorpusItem {
    /// The category an existence query asks about.
    pub fn queried_category(&self) -> Option<&'static str> {
        match crate::agents::QueryKind::parse(&self.query)? {
            crate::agents::QueryKind::Exists(c) => Some(c),
            _ => None,
        }
    }
}

/// How negative (absent-object) questions pick their category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// Uniformly among absent categories.
    Random,
    /// The globally most frequent absent categories.
    Popular,
    /// Absent categories that co-occur with a present one elsewhere.
    Adversarial,
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Setting::Random),
            "popular" => Ok(Setting::Popular),
            "adversarial" => Ok(Setting::Adversarial),
            other => Err(invalid(format!("unknown setting '{other}'"))),
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Random => "random",
            Setting::Popular => "popular",
            Setting::Adversarial => "adversarial",
        })
    }
}

pub const MIN_OBJECTS: usize = 2;
pub const MAX_OBJECTS: usize = 5;

fn random_scene(rng: &mut ChaCha8Rng) -> Scene {
    let n = rng.random_range(MIN_OBJECTS..=MAX_OBJECTS);
    let mut cells: Vec<[i32; 2]> = (0..GRID_SIZE)
        .flat_map(|y| (0..GRID_SIZE).map(move |x| [x, y]))
        .collect();
    cells.shuffle(rng);
    let objects = (0..n)
        .map(|i| {
            let category = *vocab::CATEGORIES.choose(rng).expect("non-empty");
            let mut o = SceneObject::new(i as u32, category, cells[i]);
            if rng.random_bool(0.6) {
                o = o.with(AttrSlot::Color, *vocab::COLORS.choose(rng).expect("non-empty"));
            }
            if rng.random_bool(0.4) {
                o = o.with(AttrSlot::Action, *vocab::ACTIONS.choose(rng).expect("non-empty"));
            }
            o
        })
        .collect();
    Scene::new(objects).expect("generated scene is valid")
}

fn exists_query(category: &str) -> Vec<TokenId> {
    vec![
        vocab::Q_EXISTS,
        vocab::category_token(category).expect("known category"),
        vocab::SEP,
    ]
}

/// Categories that share a scene with `category` somewhere in `scenes`.
fn co_occurrence(scenes: &[Scene]) -> BTreeMap<String, BTreeSet<String>> {
    let mut table: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for s in scenes {
        let cats = s.categories();
        for a in &cats {
            for b in &cats {
                if a != b {
                    table.entry(a.clone()).or_default().insert(b.clone());
                }
            }
        }
    }
    table
}

/// A seeded corpus alternating yes (even ids) and no (odd ids) questions.
///
/// In the adversarial setting an odd item whose scene has no co-occurring
/// absent category asks a yes question instead.
pub fn generate_corpus(size: usize, setting: Setting, seed: u64) -> Result<Vec<CorpusItem>> {
    if size == 0 {
        return Err(invalid("corpus size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes: Vec<Scene> = (0..size).map(|_| random_scene(&mut rng)).collect();

    let mut frequency: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &scenes {
        for c in s.categories() {
            *frequency
                .entry(vocab::CATEGORIES.iter().find(|x| **x == c).expect("known"))
                .or_default() += 1;
        }
    }
    let mut by_popularity: Vec<&str> = vocab::CATEGORIES.to_vec();
    by_popularity.sort_by_key(|c| std::cmp::Reverse(frequency.get(c).copied().unwrap_or(0)));
    let co = co_occurrence(&scenes);

    let mut items = Vec::with_capacity(size);
    for (id, scene) in scenes.into_iter().enumerate() {
        let present = scene.categories();
        let absent: Vec<&str> = vocab::CATEGORIES
            .iter()
            .copied()
            .filter(|c| !present.contains(*c))
            .collect();
        let negative = if id % 2 == 1 {
            match setting {
                Setting::Random => absent.choose(&mut rng).copied(),
                Setting::Popular => {
                    let top: Vec<&str> = by_popularity
                        .iter()
                        .copied()
                        .filter(|c| !present.contains(*c))
                        .take(3)
                        .collect();
                    top.choose(&mut rng).copied()
                }
                Setting::Adversarial => {
                    let linked: Vec<&str> = absent
                        .iter()
                        .copied()
                        .filter(|c| present.iter().any(|p| co.get(p).is_some_and(|s| s.contains(*c))))
                        .collect();
                    linked.choose(&mut rng).copied()
                }
            }
        } else {
            None
        };
        let (category, gold) = match negative {
            Some(c) => (c, "no"),
            None => {
                let cats: Vec<String> = present.into_iter().collect();
                let c = cats.choose(&mut rng).expect("scenes are non-empty").clone();
                (*vocab::CATEGORIES.iter().find(|x| **x == c).expect("known"), "yes")
            }
        };
        items.push(CorpusItem {
            id,
            scene,
            query: exists_query(category),
            gold_answer: gold.to_string(),
            hallucination_label: None,
        });
    }
    Ok(items)
}

/// Parses a JSON-lines corpus. Blank lines are skipped; ids default to the
/// zero-based position among items.
pub fn parse_corpus(text: &str) -> Result<Vec<CorpusItem>> {
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: i + 1, message };
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let has_id = value.get("id").is_some();
        let mut item: CorpusItem = serde_json::from_value(value).map_err(|e| err(e.to_string()))?;
        if !has_id {
            item.id = items.len();
        }
        if item.gold_answer != "yes" && item.gold_answer != "no" {
            return Err(err(format!(
                "gold_answer must be yes or no, got '{}'",
                item.gold_answer
            )));
        }
        if item.query.is_empty() {
            return Err(err("empty query".into()));
        }
        items.push(item);
    }
    if items.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "corpus has no items".into(),
        });
    }
    let ids: BTreeSet<usize> = items.iter().map(|c| c.id).collect();
    if ids.len() != items.len() {
        return Err(invalid("corpus ids are not unique"));
    }
    Ok(items)
}

pub fn write_corpus(items: &[CorpusItem]) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("corpus item serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_balanced() {
        for setting in [Setting::Random, Setting::Popular, Setting::Adversarial] {
            let a = generate_corpus(40, setting, 7).unwrap();
            assert_eq!(
                write_corpus(&a),
                write_corpus(&generate_corpus(40, setting, 7).unwrap())
            );
            assert_ne!(
                write_corpus(&a),
                write_corpus(&generate_corpus(40, setting, 8).unwrap())
            );
            for it in &a {
                assert!(it.scene.len() >= MIN_OBJECTS);
                let c = it.queried_category().unwrap();
                let present = it.scene.count_of(c) > 0;
                assert_eq!(present, it.gold_answer == "yes");
            }
            let yes = a.iter().filter(|i| i.gold_answer == "yes").count();
            if setting != Setting::Adversarial {
                assert_eq!(yes, 20);
            }
        }
        assert!(generate_corpus(0, Setting::Random, 1).is_err());
    }

    #[test]
    fn adversarial_negatives_co_occur() {
        let items = generate_corpus(60, Setting::Adversarial, 3).unwrap();
        let scenes: Vec<Scene> = items.iter().map(|i| i.scene.clone()).collect();
        let negatives: Vec<&CorpusItem> = items.iter().filter(|i| i.gold_answer == "no").collect();
        assert!(negatives.len() >= 25);
        for it in negatives {
            let neg = it.queried_category().unwrap();
            let linked = it
                .scene
                .categories()
                .iter()
                .any(|p| scenes.iter().any(|s| s.count_of(p) > 0 && s.count_of(neg) > 0));
            assert!(linked, "item {} asks about {neg}", it.id);
        }
    }

    #[test]
    fn parse_roundtrip_and_errors() {
        let items = generate_corpus(5, Setting::Random, 1).unwrap();
        assert_eq!(parse_corpus(&write_corpus(&items)).unwrap(), items);

        assert!(matches!(parse_corpus(""), Err(Error::Parse { line: 1, .. })));
        let mut text = write_corpus(&items);
        text.push_str("{\"scene\":{\"objects\":[]},\"query\":[4],\"gold_answer\":\"perhaps\"}\n");
        assert!(matches!(parse_corpus(&text), Err(Error::Parse { line: 6, .. })));
        let broken = format!("{}\n\nnot json\n", write_corpus(&items[..1]).trim_end());
        assert!(matches!(parse_corpus(&broken), Err(Error::Parse { line: 3, .. })));

        let no_ids = "{\"scene\":{\"objects\":[]},\"query\":[5],\"gold_answer\":\"no\"}\n".repeat(2);
        let parsed = parse_corpus(&no_ids).unwrap();
        assert_eq!((parsed[0].id, parsed[1].id), (0, 1));
    }
}
