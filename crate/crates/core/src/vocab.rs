//! Closed symbolic vocabulary shared by scenes, captions and the toy model.
//!
//! Token layout:
//!
//! | range   | meaning                                   |
//! |---------|-------------------------------------------|
//! | 0..12   | special tokens (BOS, EOS, query markers…) |
//! | 12..24  | object categories                         |
//! | 24..32  | colors                                    |
//! | 32..38  | actions                                   |
//! | 38..42  | counts 1..=4                              |
//! | 42..    | generic filler words                      |

use std::fmt;

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const YES: TokenId = 2;
pub const NO: TokenId = 3;
pub const Q_EXISTS: TokenId = 4;
pub const Q_DESCRIBE: TokenId = 5;
pub const Q_COLOR: TokenId = 6;
pub const Q_ACTION: TokenId = 7;
pub const Q_COUNT: TokenId = 8;
/// Marks a fact flagged as conflicting by a reflection agent.
pub const FB_CONFLICT: TokenId = 9;
/// Marks a fact the verifier found missing from the response.
pub const FB_MISSING: TokenId = 10;
pub const SEP: TokenId = 11;

pub const CATEGORIES: [&str; 12] = [
    "person", "dog", "cat", "car", "bird", "horse", "chair", "bottle", "cup", "bicycle", "sheep", "table",
];
pub const COLORS: [&str; 8] = ["red", "blue", "green", "white", "black", "yellow", "brown", "gray"];
pub const ACTIONS: [&str; 6] = ["sitting", "standing", "running", "sleeping", "eating", "flying"];
pub const MAX_COUNT: usize = 4;

const CATEGORY_BASE: TokenId = 12;
const COLOR_BASE: TokenId = CATEGORY_BASE + CATEGORIES.len() as TokenId;
const ACTION_BASE: TokenId = COLOR_BASE + COLORS.len() as TokenId;
const COUNT_BASE: TokenId = ACTION_BASE + ACTIONS.len() as TokenId;

/// Smallest vocabulary that holds every symbolic token.
pub const MIN_VOCAB_SIZE: usize = (COUNT_BASE as usize) + MAX_COUNT;

/// The slot of a fact triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Exists,
    Color,
    Action,
    Count,
}

impl Slot {
    pub fn as_str(self) -> &'static str {
        match self {
            Slot::Exists => "exists",
            Slot::Color => "color",
            Slot::Action => "action",
            Slot::Count => "count",
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a symbolic token denotes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Symbol {
    Special(TokenId),
    Category(&'static str),
    Color(&'static str),
    Action(&'static str),
    Count(usize),
    Filler(TokenId),
}

pub fn category_token(name: &str) -> Option<TokenId> {
    CATEGORIES
        .iter()
        .position(|c| *c == name)
        .map(|i| CATEGORY_BASE + i as TokenId)
}

pub fn color_token(name: &str) -> Option<TokenId> {
    COLORS
        .iter()
        .position(|c| *c == name)
        .map(|i| COLOR_BASE + i as TokenId)
}

pub fn action_token(name: &str) -> Option<TokenId> {
    ACTIONS
        .iter()
        .position(|c| *c == name)
        .map(|i| ACTION_BASE + i as TokenId)
}

pub fn count_token(n: usize) -> Option<TokenId> {
    (1..=MAX_COUNT).contains(&n).then(|| COUNT_BASE + (n - 1) as TokenId)
}

/// Token for the value of a slot (`"true"` for existence maps to `YES`).
pub fn value_token(slot: Slot, value: &str) -> Option<TokenId> {
    match slot {
        Slot::Exists => match value {
            "true" => Some(YES),
            "false" => Some(NO),
            _ => None,
        },
        Slot::Color => color_token(value),
        Slot::Action => action_token(value),
        Slot::Count => value.parse().ok().and_then(count_token),
    }
}

pub fn symbol_of(token: TokenId) -> Symbol {
    let t = token;
    if t < CATEGORY_BASE {
        Symbol::Special(t)
    } else if t < COLOR_BASE {
        Symbol::Category(CATEGORIES[(t - CATEGORY_BASE) as usize])
    } else if t < ACTION_BASE {
        Symbol::Color(COLORS[(t - COLOR_BASE) as usize])
    } else if t < COUNT_BASE {
        Symbol::Action(ACTIONS[(t - ACTION_BASE) as usize])
    } else if (t as usize) < MIN_VOCAB_SIZE {
        Symbol::Count((t - COUNT_BASE) as usize + 1)
    } else {
        Symbol::Filler(t)
    }
}

pub fn is_category(name: &str) -> bool {
    category_token(name).is_some()
}

/// Whether `value` is admissible for `slot`.
pub fn valid_value(slot: Slot, value: &str) -> bool {
    value_token(slot, value).is_some()
}

pub fn category_tokens() -> impl Iterator<Item = TokenId> {
    CATEGORY_BASE..COLOR_BASE
}

pub fn color_tokens() -> impl Iterator<Item = TokenId> {
    COLOR_BASE..ACTION_BASE
}

pub fn action_tokens() -> impl Iterator<Item = TokenId> {
    ACTION_BASE..COUNT_BASE
}

pub fn count_tokens() -> impl Iterator<Item = TokenId> {
    COUNT_BASE..MIN_VOCAB_SIZE as TokenId
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_round_trip() {
        for c in CATEGORIES {
            assert_eq!(symbol_of(category_token(c).unwrap()), Symbol::Category(c));
        }
        for c in COLORS {
            assert_eq!(symbol_of(color_token(c).unwrap()), Symbol::Color(c));
        }
        for a in ACTIONS {
            assert_eq!(symbol_of(action_token(a).unwrap()), Symbol::Action(a));
        }
        for n in 1..=MAX_COUNT {
            assert_eq!(symbol_of(count_token(n).unwrap()), Symbol::Count(n));
        }
        assert_eq!(MIN_VOCAB_SIZE, 42);
        assert_eq!(symbol_of(42), Symbol::Filler(42));
        assert_eq!(count_token(0), None);
        assert_eq!(count_token(5), None);
    }
}
