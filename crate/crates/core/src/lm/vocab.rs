use std::collections::HashMap;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const NEWLINE: TokenId = 1;
pub const ARROW: TokenId = 2;
pub const EOS: TokenId = 3;

/// How a token joins its neighbours when rendered to text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Join {
    /// Separated from adjacent spaced tokens by one space.
    Spaced,
    /// Concatenated with no whitespace (punctuation-bearing label pieces).
    Glue,
}

const RESERVED: [(&str, Join); 4] = [
    ("<pad>", Join::Spaced),
    ("\n", Join::Glue),
    ("⇒", Join::Spaced),
    ("<eos>", Join::Spaced),
];

/// Label skeleton pieces. The first three form the FSC-style format; the
/// rest are alternative keys used to vary formats during pretraining.
pub const KEY_TOKENS: [&str; 6] = ["action=", ", object=", ", location=", "a=", "b=", "c="];

/// JSON-shaped label pieces for the SLURP-style task.
pub const JSON_TOKENS: [&str; 8] = [
    "{\"scenario\": \"",
    "\", \"action\": \"",
    "\", \"entities\": [",
    "{\"type\": \"",
    "\", \"filler\": \"",
    "\"}",
    ", ",
    "]}",
];

pub const WORDS: [&str; 46] = [
    // fsc actions
    "activate", "deactivate", "increase", "decrease", "bring", "change",
    // fsc objects
    "lights", "music", "lamp", "volume", "heat", "juice", "shoes", "socks",
    // fsc locations
    "kitchen", "bedroom", "washroom", "none",
    // fsc template words
    "please", "the", "in",
    // slurp scenarios
    "alarm", "calendar", "weather",
    // slurp actions
    "set", "query", "remove",
    // slurp entity types
    "date", "time", "place_name", "person",
    // slurp fillers
    "friday", "monday", "next", "morning", "noon", "paris", "london", "alice", "bob",
    // slurp template words
    "meeting", "what", "for", "on", "with",
    // recognition prompt
    "transcribe",
];

/// Fixed toy vocabulary: four reserved ids followed by label pieces and
/// words. Surface forms are unique, so ids and surfaces are in bijection.
#[derive(Debug, Clone)]
pub struct Vocab {
    surfaces: Vec<String>,
    joins: Vec<Join>,
    by_surface: HashMap<String, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut entries: Vec<(&str, Join)> = RESERVED.to_vec();
        entries.extend(KEY_TOKENS.iter().map(|s| (*s, Join::Glue)));
        entries.extend(JSON_TOKENS.iter().map(|s| (*s, Join::Glue)));
        entries.extend(WORDS.iter().map(|s| (*s, Join::Spaced)));
        let surfaces: Vec<String> = entries.iter().map(|(s, _)| s.to_string()).collect();
        let joins = entries.iter().map(|(_, j)| *j).collect();
        let by_surface = surfaces
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as TokenId))
            .collect();
        Self {
            surfaces,
            joins,
            by_surface,
        }
    }
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.surfaces.len()
    }

    /// Ids usable as ordinary content (everything but the reserved four).
    pub fn word_ids(&self) -> std::ops::Range<TokenId> {
        RESERVED.len() as TokenId..self.size() as TokenId
    }

    pub fn surface(&self, id: TokenId) -> Result<&str> {
        self.surfaces
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::TokenRange {
                id,
                vocab: self.size(),
            })
    }

    pub fn id(&self, surface: &str) -> Result<TokenId> {
        self.by_surface
            .get(surface)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("unknown token surface {surface:?}")))
    }

    /// Panicking lookup for the compiled-in grammar, whose surfaces are
    /// guaranteed to exist.
    pub fn tok(&self, surface: &str) -> TokenId {
        self.id(surface)
            .unwrap_or_else(|_| panic!("grammar token {surface:?} missing from vocabulary"))
    }

    pub fn check(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&i| i as usize >= self.size()) {
            Some(&id) => Err(Error::TokenRange {
                id,
                vocab: self.size(),
            }),
            None => Ok(()),
        }
    }

    /// Renders ids to text: a single space between two spaced tokens, glue
    /// tokens attach directly.
    pub fn render(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut prev: Option<Join> = None;
        for &id in ids {
            let (s, j) = match self.surfaces.get(id as usize) {
                Some(s) => (s.as_str(), self.joins[id as usize]),
                None => ("<unk>", Join::Spaced),
            };
            if prev == Some(Join::Spaced) && j == Join::Spaced {
                out.push(' ');
            }
            out.push_str(s);
            prev = Some(j);
        }
        out
    }
}
