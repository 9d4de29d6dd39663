//! Toy command-classification and slot-filling grammars.
//!
//! Both are copy-solvable: slot words (and entity fillers) appear verbatim in
//! the transcript, except the `none` location which is the absent-slot
//! sentinel and is never spoken.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{vocab, TokenId, Vocab};
use crate::numcore::Prng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Fsc,
    Slurp,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Fsc => "fsc",
            TaskKind::Slurp => "slurp",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fsc" => Ok(TaskKind::Fsc),
            "slurp" => Ok(TaskKind::Slurp),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FscSlots {
    pub action: String,
    pub object: String,
    pub location: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Entity {
    #[serde(rename = "type")]
    pub kind: String,
    pub filler: String,
}

impl Entity {
    pub fn new(kind: &str, filler: &str) -> Self {
        Self {
            kind: kind.into(),
            filler: filler.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SlurpSlots {
    pub scenario: String,
    pub action: String,
    pub entities: Vec<Entity>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum Slots {
    Fsc(FscSlots),
    Slurp(SlurpSlots),
}

impl Slots {
    pub fn kind(&self) -> TaskKind {
        match self {
            Slots::Fsc(_) => TaskKind::Fsc,
            Slots::Slurp(_) => TaskKind::Slurp,
        }
    }
}

pub const NO_LOCATION: &str = "none";

#[derive(Debug, Clone, PartialEq)]
pub struct ToyFscSpec {
    pub actions: Vec<String>,
    pub objects: Vec<String>,
    pub locations: Vec<String>,
}

impl Default for ToyFscSpec {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect();
        Self {
            actions: s(&["activate", "deactivate", "increase", "decrease", "bring", "change"]),
            objects: s(&["lights", "music", "lamp", "volume", "heat", "juice", "shoes", "socks"]),
            locations: s(&["kitchen", "bedroom", "washroom", NO_LOCATION]),
        }
    }
}

impl ToyFscSpec {
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.actions.is_empty() || self.objects.is_empty() || self.locations.is_empty() {
            return Err(Error::Config("fsc spec has an empty slot vocabulary".into()));
        }
        for w in self.actions.iter().chain(&self.objects).chain(&self.locations) {
            vocab.id(w)?;
        }
        Ok(())
    }

    pub fn sample_slots(&self, prng: &mut Prng) -> FscSlots {
        FscSlots {
            action: prng.choose(&self.actions).clone(),
            object: prng.choose(&self.objects).clone(),
            location: prng.choose(&self.locations).clone(),
        }
    }

    /// `[please] ACTION [the] OBJECT [in LOCATION]`; the location phrase is
    /// omitted for `none`.
    pub fn render_transcript(&self, vocab: &Vocab, slots: &FscSlots, prng: &mut Prng) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(6);
        if prng.bernoulli(0.5) {
            out.push(vocab.tok("please"));
        }
        out.push(vocab.tok(&slots.action));
        if prng.bernoulli(0.5) {
            out.push(vocab.tok("the"));
        }
        out.push(vocab.tok(&slots.object));
        if slots.location != NO_LOCATION {
            out.push(vocab.tok("in"));
            out.push(vocab.tok(&slots.location));
        }
        out
    }
}

/// `action=X, object=Y, location=Z` with configurable key tokens.
pub fn render_fsc_label(vocab: &Vocab, slots: &FscSlots, keys: [TokenId; 3]) -> Vec<TokenId> {
    vec![
        keys[0],
        vocab.tok(&slots.action),
        keys[1],
        vocab.tok(&slots.object),
        keys[2],
        vocab.tok(&slots.location),
    ]
}

pub fn fsc_keys(vocab: &Vocab) -> [TokenId; 3] {
    [
        vocab.tok(vocab::KEY_TOKENS[0]),
        vocab.tok(vocab::KEY_TOKENS[1]),
        vocab.tok(vocab::KEY_TOKENS[2]),
    ]
}

#[derive(Debug, Clone, PartialEq)]
enum Piece {
    Word(String),
    Slot(String),
    Optional(Vec<Piece>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlurpTemplate {
    pub scenario: String,
    pub action: String,
    pattern: Vec<Piece>,
}

impl SlurpTemplate {
    /// Parses a pattern like `set alarm for {time} [on {date}]`.
    pub fn parse(scenario: &str, action: &str, pattern: &str) -> Result<Self> {
        let mut stack: Vec<Vec<Piece>> = vec![Vec::new()];
        for raw in pattern.split_whitespace() {
            let mut w = raw;
            while let Some(rest) = w.strip_prefix('[') {
                stack.push(Vec::new());
                w = rest;
            }
            let mut closes = 0;
            while let Some(rest) = w.strip_suffix(']') {
                closes += 1;
                w = rest;
            }
            if !w.is_empty() {
                let piece = match w.strip_prefix('{').and_then(|x| x.strip_suffix('}')) {
                    Some(slot) => Piece::Slot(slot.to_string()),
                    None => Piece::Word(w.to_string()),
                };
                stack.last_mut().expect("stack nonempty").push(piece);
            }
            for _ in 0..closes {
                let group = stack.pop().expect("stack nonempty");
                let parent = stack
                    .last_mut()
                    .ok_or_else(|| Error::Config(format!("unbalanced ']' in {pattern:?}")))?;
                parent.push(Piece::Optional(group));
            }
        }
        if stack.len() != 1 {
            return Err(Error::Config(format!("unbalanced '[' in {pattern:?}")));
        }
        Ok(Self {
            scenario: scenario.into(),
            action: action.into(),
            pattern: stack.pop().expect("root"),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySlurpSpec {
    pub scenarios: Vec<String>,
    pub actions: Vec<String>,
    pub entity_types: Vec<String>,
    /// Filler phrases per entity type, in `entity_types` order.
    pub fillers: Vec<Vec<String>>,
    pub templates: Vec<SlurpTemplate>,
}

impl Default for ToySlurpSpec {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let t = |sc, ac, p| SlurpTemplate::parse(sc, ac, p).expect("built-in template parses");
        Self {
            scenarios: s(&["alarm", "calendar", "weather"]),
            actions: s(&["set", "query", "remove"]),
            entity_types: s(&["date", "time", "place_name", "person"]),
            fillers: vec![
                s(&["friday", "monday", "next friday", "next monday"]),
                s(&["morning", "noon"]),
                s(&["paris", "london"]),
                s(&["alice", "bob"]),
            ],
            templates: vec![
                t("alarm", "set", "set alarm for {time} [on {date}]"),
                t("alarm", "remove", "remove alarm for {time}"),
                t("alarm", "query", "what alarm on {date}"),
                t("calendar", "set", "set meeting with {person} on {date}"),
                t("calendar", "query", "what meeting on {date}"),
                t("calendar", "remove", "remove meeting with {person}"),
                t("weather", "query", "what weather in {place_name} [on {date}]"),
            ],
        }
    }
}

impl ToySlurpSpec {
    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.fillers.len() != self.entity_types.len() || self.templates.is_empty() {
            return Err(Error::Config("slurp spec fillers/templates mismatch".into()));
        }
        for w in self.scenarios.iter().chain(&self.actions).chain(&self.entity_types) {
            vocab.id(w)?;
        }
        for f in self.fillers.iter().flatten() {
            for w in f.split_whitespace() {
                vocab.id(w)?;
            }
        }
        fn walk(p: &[Piece], vocab: &Vocab, types: &[String]) -> Result<()> {
            for piece in p {
                match piece {
                    Piece::Word(w) => {
                        vocab.id(w)?;
                    }
                    Piece::Slot(s) if !types.contains(s) => {
                        return Err(Error::Config(format!("template slot {s:?} has no entity type")))
                    }
                    Piece::Slot(_) => {}
                    Piece::Optional(inner) => walk(inner, vocab, types)?,
                }
            }
            Ok(())
        }
        for t in &self.templates {
            vocab.id(&t.scenario)?;
            vocab.id(&t.action)?;
            walk(&t.pattern, vocab, &self.entity_types)?;
        }
        Ok(())
    }

    /// Samples a template and fills it; entities are listed in order of
    /// appearance in the transcript.
    pub fn sample(&self, vocab: &Vocab, prng: &mut Prng) -> (SlurpSlots, Vec<TokenId>) {
        let tpl = prng.choose(&self.templates);
        let mut transcript = Vec::new();
        let mut entities = Vec::new();
        self.expand(&tpl.pattern, vocab, prng, &mut transcript, &mut entities);
        let slots = SlurpSlots {
            scenario: tpl.scenario.clone(),
            action: tpl.action.clone(),
            entities,
        };
        (slots, transcript)
    }

    fn expand(
        &self,
        pattern: &[Piece],
        vocab: &Vocab,
        prng: &mut Prng,
        out: &mut Vec<TokenId>,
        entities: &mut Vec<Entity>,
    ) {
        for piece in pattern {
            match piece {
                Piece::Word(w) => out.push(vocab.tok(w)),
                Piece::Slot(kind) => {
                    let ti = self
                        .entity_types
                        .iter()
                        .position(|t| t == kind)
                        .expect("validated slot type");
                    let filler = prng.choose(&self.fillers[ti]).clone();
                    out.extend(filler.split_whitespace().map(|w| vocab.tok(w)));
                    entities.push(Entity::new(kind, &filler));
                }
                Piece::Optional(inner) => {
                    if prng.bernoulli(0.5) {
                        self.expand(inner, vocab, prng, out, entities);
                    }
                }
            }
        }
    }
}

/// JSON-shaped label over toy surfaces, e.g.
/// `{"scenario": "alarm", "action": "set", "entities": [{"type": "time", "filler": "noon"}]}`.
pub fn render_slurp_label(vocab: &Vocab, slots: &SlurpSlots) -> Vec<TokenId> {
    let j = |i: usize| vocab.tok(vocab::JSON_TOKENS[i]);
    let mut out = vec![j(0), vocab.tok(&slots.scenario), j(1), vocab.tok(&slots.action), j(2)];
    for (i, e) in slots.entities.iter().enumerate() {
        if i > 0 {
            out.push(j(6));
        }
        out.push(j(3));
        out.push(vocab.tok(&e.kind));
        out.push(j(4));
        out.extend(e.filler.split_whitespace().map(|w| vocab.tok(w)));
        out.push(j(5));
    }
    out.push(j(7));
    out
}

/// Fixed short instruction fixing the output format, ending in a newline.
pub fn instruction(vocab: &Vocab, kind: TaskKind) -> Vec<TokenId> {
    let mut out: Vec<TokenId> = match kind {
        TaskKind::Fsc => fsc_keys(vocab).to_vec(),
        TaskKind::Slurp => vocab::JSON_TOKENS[..3].iter().map(|s| vocab.tok(s)).collect(),
    };
    out.push(vocab::NEWLINE);
    out
}

pub fn render_label(vocab: &Vocab, slots: &Slots) -> Vec<TokenId> {
    match slots {
        Slots::Fsc(s) => render_fsc_label(vocab, s, fsc_keys(vocab)),
        Slots::Slurp(s) => render_slurp_label(vocab, s),
    }
}

/// Draws one transcript with its slots from either grammar.
pub fn sample_utterance(
    kind: TaskKind,
    vocab: &Vocab,
    fsc: &ToyFscSpec,
    slurp: &ToySlurpSpec,
    prng: &mut Prng,
) -> (Slots, Vec<TokenId>) {
    match kind {
        TaskKind::Fsc => {
            let s = fsc.sample_slots(prng);
            let t = fsc.render_transcript(vocab, &s, prng);
            (Slots::Fsc(s), t)
        }
        TaskKind::Slurp => {
            let (s, t) = slurp.sample(vocab, prng);
            (Slots::Slurp(s), t)
        }
    }
}
