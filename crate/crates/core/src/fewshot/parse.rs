//! Output parsers. A failed parse is a value, never an error: it scores zero.

use serde::{Deserialize, Serialize};

use crate::fewshot::tasks::{FscSlots, Slots, SlurpSlots, TaskKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parsed {
    Ok(Slots),
    Failed(String),
}

impl Parsed {
    pub fn slots(&self) -> Option<&Slots> {
        match self {
            Parsed::Ok(s) => Some(s),
            Parsed::Failed(_) => None,
        }
    }
}

/// `action=X, object=Y, location=Z`, lenient about whitespace around every
/// key, value and comma. Keys must appear once each, in that order.
pub fn parse_fsc(text: &str) -> Parsed {
    let fields: Vec<&str> = text.trim().split(',').collect();
    if fields.len() != 3 {
        return Parsed::Failed(format!("expected 3 comma-separated fields, found {}", fields.len()));
    }
    let mut values = Vec::with_capacity(3);
    for (field, key) in fields.iter().zip(["action", "object", "location"]) {
        let Some((k, v)) = field.split_once('=') else {
            return Parsed::Failed(format!("field {:?} has no '='", field.trim()));
        };
        if k.trim() != key {
            return Parsed::Failed(format!("expected key {key:?}, found {:?}", k.trim()));
        }
        let v = v.trim();
        if v.is_empty() || v.contains(char::is_whitespace) {
            return Parsed::Failed(format!("bad value {v:?} for {key}"));
        }
        values.push(v.to_string());
    }
    let location = values.pop().unwrap();
    let object = values.pop().unwrap();
    let action = values.pop().unwrap();
    Parsed::Ok(Slots::Fsc(FscSlots { action, object, location }))
}

/// The JSON label shape; entity fillers are whitespace-normalized.
pub fn parse_slurp(text: &str) -> Parsed {
    match serde_json::from_str::<SlurpSlots>(text.trim()) {
        Ok(mut s) => {
            for e in &mut s.entities {
                e.filler = e.filler.split_whitespace().collect::<Vec<_>>().join(" ");
            }
            Parsed::Ok(Slots::Slurp(s))
        }
        Err(e) => Parsed::Failed(e.to_string()),
    }
}

pub fn parse(kind: TaskKind, text: &str) -> Parsed {
    match kind {
        TaskKind::Fsc => parse_fsc(text),
        TaskKind::Slurp => parse_slurp(text),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fsc_template_form() {
        let want = Slots::Fsc(FscSlots {
            action: "activate".into(),
            object: "lights".into(),
            location: "none".into(),
        });
        assert_eq!(parse_fsc("action=activate, object=lights, location=none"), Parsed::Ok(want.clone()));
        assert_eq!(parse_fsc("  action = activate ,object=lights,  location=none\n"), Parsed::Ok(want));
    }

    #[test]
    fn fsc_failures_are_data() {
        for bad in ["", "action=activate", "object=lights, action=activate, location=none", "action=, object=x, location=y"] {
            assert!(matches!(parse_fsc(bad), Parsed::Failed(_)), "{bad:?}");
        }
    }

    #[test]
    fn slurp_json_and_failures() {
        let p = parse_slurp(r#" {"scenario": "alarm", "action": "set", "entities": [{"type": "date", "filler": "next  friday"}]} "#);
        let Parsed::Ok(Slots::Slurp(s)) = p else { panic!("{p:?}") };
        assert_eq!(s.entities[0].filler, "next friday");
        assert!(matches!(parse_slurp(""), Parsed::Failed(_)));
        assert!(matches!(parse_slurp(r#"{"scenario": "alarm""#), Parsed::Failed(_)));
    }
}
