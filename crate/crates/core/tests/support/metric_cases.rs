//! Pinned metric oracles shared by the metric tests and the acceptance run.
//! SLU-F1 values were computed independently in exact rational arithmetic.

use seal_core::fewshot::gen_task;
use seal_core::fewshot::metrics::{accuracy, slu_f1};
use seal_core::fewshot::parse::{parse, Parsed};
use seal_core::fewshot::tasks::{self, Entity, FscSlots, Slots, SlurpSlots, TaskKind};
use seal_core::lm::Vocab;

type Ex = (Vec<Entity>, Vec<Entity>);

pub fn e(kind: &str, filler: &str) -> Entity {
    Entity::new(kind, filler)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 4.0 * f64::EPSILON * b.abs().max(1.0)
}

/// `(examples, word_f1, char_f1, slu_f1)`.
pub fn pinned() -> Vec<(Vec<Ex>, f64, f64, f64)> {
    let d = |f| e("date", f);
    let t = |f| e("time", f);
    let p = |f| e("person", f);
    let l = |f| e("place_name", f);
    vec![
        (vec![(vec![d("friday")], vec![d("friday")])], 1.0, 1.0, 1.0),
        (vec![(vec![t("noon")], vec![d("friday")])], 0.0, 0.0, 0.0),
        (vec![(vec![], vec![])], 1.0, 1.0, 1.0),
        (vec![(vec![], vec![d("friday")])], 0.0, 0.0, 0.0),
        (vec![(vec![d("friday")], vec![])], 0.0, 0.0, 0.0),
        (vec![(vec![d("friday")], vec![d("next friday")])], 2.0 / 3.0, 3.0 / 4.0, 12.0 / 17.0),
        (vec![(vec![d("monday")], vec![d("friday")])], 0.0, 1.0 / 2.0, 0.0),
        (vec![(vec![d("next friday")], vec![d("friday")])], 2.0 / 3.0, 3.0 / 4.0, 12.0 / 17.0),
        (vec![(vec![d("friday"), t("noon")], vec![d("friday")])], 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0),
        (vec![(vec![d("friday")], vec![d("friday"), t("noon")])], 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0),
        (vec![(vec![p("alice"), p("bob")], vec![p("bob"), p("alice")])], 1.0, 1.0, 1.0),
        (vec![(vec![p("alice")], vec![p("bob"), p("alice")])], 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0),
        (
            vec![(vec![d("next monday"), t("morning")], vec![d("next friday"), t("noon")])],
            1.0 / 4.0,
            137.0 / 220.0,
            137.0 / 384.0,
        ),
        (vec![(vec![l("paris")], vec![l("london")])], 0.0, 0.0, 0.0),
        (
            vec![(vec![d("next friday"), d("friday")], vec![d("friday"), d("next friday")])],
            1.0,
            1.0,
            1.0,
        ),
        (vec![(vec![d("next next")], vec![d("next friday")])], 1.0 / 2.0, 4.0 / 9.0, 8.0 / 17.0),
        (vec![(vec![t("morning")], vec![t("noon")])], 0.0, 6.0 / 11.0, 0.0),
        (
            vec![(vec![d("friday")], vec![d("friday")]), (vec![], vec![t("noon")])],
            2.0 / 3.0,
            2.0 / 3.0,
            2.0 / 3.0,
        ),
        (
            vec![(vec![p("alice")], vec![p("bob")]), (vec![d("monday")], vec![d("next monday")])],
            1.0 / 3.0,
            3.0 / 8.0,
            6.0 / 17.0,
        ),
        (vec![(vec![d("friday"), d("monday")], vec![d("monday")])], 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0),
    ]
}

/// Returns one line per pinned SLU-F1 component that misses its value.
pub fn slu_mismatches() -> Vec<String> {
    let mut bad = Vec::new();
    for (k, (ex, w, c, s)) in pinned().iter().enumerate() {
        let got = slu_f1(ex);
        for (name, g, want) in [("word", got.word_f1, *w), ("char", got.char_f1, *c), ("slu", got.slu_f1, *s)] {
            if !close(g, want) {
                bad.push(format!("case {}: {name} {g} vs {want}", k + 1));
            }
        }
    }
    bad
}

fn fsc(a: &str, o: &str, l: &str) -> Slots {
    Slots::Fsc(FscSlots {
        action: a.into(),
        object: o.into(),
        location: l.into(),
    })
}

fn intent(s: &str, a: &str) -> Slots {
    Slots::Slurp(SlurpSlots {
        scenario: s.into(),
        action: a.into(),
        entities: vec![e("date", "friday")],
    })
}

/// Hand-counted accuracy cases; returns the mismatches.
pub fn accuracy_mismatches() -> Vec<String> {
    let mut bad = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| {
        if got != want {
            bad.push(format!("{name}: {got} vs {want}"));
        }
    };
    let g = [
        fsc("bring", "shoes", "none"),
        fsc("activate", "lights", "kitchen"),
        fsc("increase", "heat", "bedroom"),
        fsc("decrease", "volume", "none"),
    ];
    let golds: Vec<&Slots> = g.iter().collect();
    let wrong = fsc("bring", "shoes", "kitchen");
    let all: Vec<Option<&Slots>> = g.iter().map(Some).collect();
    check("case 1", accuracy(&all, &golds).unwrap(), 1.0);
    check("case 2", accuracy(&[Some(&wrong); 4], &golds).unwrap(), 0.0);
    check("case 3", accuracy(&[Some(&g[0]), Some(&g[1]), Some(&g[2]), None], &golds).unwrap(), 0.75);
    check("case 4", accuracy(&[Some(&g[0]), Some(&wrong), Some(&g[2]), Some(&g[3])], &golds).unwrap(), 0.75);
    // Intent accuracy ignores entities.
    let mut other = intent("alarm", "set");
    if let Slots::Slurp(s) = &mut other {
        s.entities.clear();
    }
    let gi = [intent("alarm", "set"), intent("weather", "query")];
    let golds: Vec<&Slots> = gi.iter().collect();
    check("case 5", accuracy(&[Some(&other), Some(&gi[0])], &golds).unwrap(), 0.5);
    bad
}

/// Renders and re-parses `per_kind` generated labels of each task.
pub fn round_trip_failures(per_kind: usize) -> Vec<String> {
    let vocab = Vocab::default();
    let mut bad = Vec::new();
    for kind in [TaskKind::Fsc, TaskKind::Slurp] {
        for ex in gen_task(kind, per_kind, 99) {
            let text = vocab.render(&tasks::render_label(&vocab, &ex.slots));
            if parse(kind, &text) != Parsed::Ok(ex.slots.clone()) {
                bad.push(text);
            }
        }
    }
    bad
}
