pub mod data;
pub mod eval;
pub mod metrics;
pub mod parse;
pub mod prompt;
pub mod tasks;

pub use data::{encode_all, gen_task, Encoded, Example};
pub use eval::{run_eval, EvalCell, EvalContext, EvalReport, Record};
pub use metrics::{accuracy, slu_f1, SluF1};
pub use parse::{parse_fsc, parse_slurp, Parsed};
pub use prompt::{assemble, kate_select, select, Bridge, Modality, PromptPlan, Selection};
pub use tasks::{Slots, TaskKind};
