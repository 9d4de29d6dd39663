//! One evaluation cell: (task, n-shot, modality, selection) over a test set.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fewshot::data::Encoded;
use crate::fewshot::metrics::{accuracy, slu_f1};
use crate::fewshot::parse::{parse, Parsed};
use crate::fewshot::prompt::{assemble, select, Bridge, Modality, PromptPlan, Selection};
use crate::fewshot::tasks::{self, Slots, TaskKind};
use crate::lm::{LanguageModel, Vocab, NEWLINE};
use crate::numcore::Prng;
use crate::parallel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EvalCell {
    pub task: TaskKind,
    pub n_shot: usize,
    /// Modality of the shots.
    pub modality: Modality,
    /// Modality of the query; spoken unless measuring the transcript ceiling.
    pub query: Modality,
    pub selection: Selection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub index: usize,
    /// Pool indices of the shots, in prompt order.
    pub shots: Vec<usize>,
    pub gold: Slots,
    pub output: String,
    pub parsed: Parsed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub cell: EvalCell,
    pub metrics: BTreeMap<String, f64>,
    pub records: Vec<Record>,
}

impl EvalReport {
    /// Aggregates derived from `records` alone.
    pub fn recompute(records: &[Record], task: TaskKind) -> Result<BTreeMap<String, f64>> {
        let preds: Vec<Option<&Slots>> = records.iter().map(|r| r.parsed.slots()).collect();
        let golds: Vec<&Slots> = records.iter().map(|r| &r.gold).collect();
        let mut m = BTreeMap::new();
        m.insert("accuracy".to_string(), accuracy(&preds, &golds)?);
        if task == TaskKind::Slurp {
            let pairs: Vec<_> = records
                .iter()
                .map(|r| {
                    let pred = match r.parsed.slots() {
                        Some(Slots::Slurp(s)) => s.entities.clone(),
                        _ => Vec::new(),
                    };
                    let gold = match &r.gold {
                        Slots::Slurp(s) => s.entities.clone(),
                        Slots::Fsc(_) => Vec::new(),
                    };
                    (pred, gold)
                })
                .collect();
            let f = slu_f1(&pairs);
            m.insert("slu_f1".to_string(), f.slu_f1);
            m.insert("word_f1".to_string(), f.word_f1);
            m.insert("char_f1".to_string(), f.char_f1);
        }
        Ok(m)
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn is_consistent(&self) -> bool {
        Self::recompute(&self.records, self.cell.task).is_ok_and(|m| m == self.metrics)
    }
}

/// Frozen pieces shared by every cell of a sweep.
#[derive(Clone, Copy)]
pub struct EvalContext<'a> {
    pub lm: &'a LanguageModel,
    /// Needed only for speech cells.
    pub bridge: Option<Bridge<'a>>,
    pub test: &'a [Encoded],
    pub pool: &'a [Encoded],
    pub seed: u64,
    pub max_new: usize,
}

/// Selects shots, assembles, decodes greedily to the newline, parses and
/// scores every test example. Prompt-length failures are recorded as
/// failed parses.
pub fn run_eval(ctx: &EvalContext, cell: EvalCell) -> Result<EvalReport> {
    if ctx.test.is_empty() {
        return Err(Error::Invalid("empty test set".into()));
    }
    if cell.n_shot > ctx.pool.len() {
        return Err(Error::Invalid(format!(
            "{}-shot needs a pool of at least that size, have {}",
            cell.n_shot,
            ctx.pool.len()
        )));
    }
    let bridge = match (cell.modality, cell.query) {
        (Modality::Text, Modality::Text) => None,
        _ => Some(
            ctx.bridge
                .ok_or_else(|| Error::Config("speech evaluation needs a projector".into()))?,
        ),
    };
    let vocab = Vocab::default();
    let instruction = tasks::instruction(&vocab, cell.task);
    let idx: Vec<usize> = (0..ctx.test.len()).collect();
    let records = parallel::map(&idx, |&i| -> Result<Record> {
        let query = &ctx.test[i];
        if query.example.slots.kind() != cell.task {
            return Err(Error::Invalid(format!("test example {i} is not a {} example", cell.task.name())));
        }
        let mut prng = Prng::derive(ctx.seed, i as u64);
        let shots = select(cell.selection, query, ctx.pool, cell.n_shot, &mut prng)?;
        let plan = PromptPlan {
            instruction: instruction.clone(),
            shots: shots.iter().map(|&s| &ctx.pool[s]).collect(),
            query,
            modality: cell.modality,
            query_modality: cell.query,
            selection: cell.selection,
        };
        let (output, parsed) = match assemble(&plan, bridge, ctx.lm.config.max_seq_len) {
            Ok(seq) => {
                let budget = ctx.max_new.min(ctx.lm.config.max_seq_len.saturating_sub(seq.len()));
                let out = ctx.lm.greedy_generate(&seq, NEWLINE, budget)?;
                let text = vocab.render(&out);
                let parsed = parse(cell.task, &text);
                (text, parsed)
            }
            Err(e @ Error::Overlength { .. }) => (String::new(), Parsed::Failed(e.to_string())),
            Err(e) => return Err(e),
        };
        Ok(Record {
            index: i,
            shots,
            gold: query.example.slots.clone(),
            output,
            parsed,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let metrics = EvalReport::recompute(&records, cell.task)?;
    Ok(EvalReport { cell, metrics, records })
}
