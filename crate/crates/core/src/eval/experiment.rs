//! Replaying dialogs against a model and accumulating every metric.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use tracing::{info, warn};

use super::dataset::{load_redial, Dialog};
use super::metrics::{distinct_n, tokenize, BleuStats, RecallAccumulator};
use super::report::MetricsReport;
use super::EvalError;
use crate::conversation::Speaker;
use crate::engine::Model;
use crate::explainer::{CompletionClient, FallbackOnlyClient};
use crate::kg::render_placeholders;

pub const DEFAULT_KS: [usize; 3] = [1, 10, 50];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentConfig {
    pub dialogs: PathBuf,
    pub model_dir: PathBuf,
    pub ks: Vec<usize>,
}

impl ExperimentConfig {
    pub fn new(dialogs: impl Into<PathBuf>, model_dir: impl Into<PathBuf>) -> Self {
        Self { dialogs: dialogs.into(), model_dir: model_dir.into(), ks: DEFAULT_KS.to_vec() }
    }
}

fn require(path: &Path, what: &str) -> Result<(), EvalError> {
    if path.exists() {
        Ok(())
    } else {
        Err(EvalError::Config(format!("{what} {} does not exist", path.display())))
    }
}

/// Loads the model and dialogs named by `cfg` and evaluates offline, with
/// template explanations.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport, EvalError> {
    require(&cfg.dialogs, "dialog file")?;
    require(&cfg.model_dir, "model directory")?;
    let model = Model::load(&cfg.model_dir)?;
    let loaded = load_redial(&cfg.dialogs)?;
    if loaded.skipped > 0 {
        warn!(skipped = loaded.skipped, "malformed dialog lines were skipped");
    }
    evaluate(&model, &loaded.dialogs, &cfg.ks, &FallbackOnlyClient)
}

/// Replays each dialog up to each gold turn. Recall uses the ranking at
/// that point; BLEU and Dist-n compare the agent's response text with the
/// gold turn text (placeholders rendered as names).
pub fn evaluate(
    model: &Model,
    dialogs: &[Dialog],
    ks: &[usize],
    client: &dyn CompletionClient,
) -> Result<MetricsReport, EvalError> {
    let mut recall = RecallAccumulator::new(ks)?;
    let depth = *recall.ks().last().expect("non-empty cutoffs");
    let mut bleu = BleuStats::default();
    let mut responses: Vec<Vec<String>> = Vec::new();
    let mut unusable = 0usize;
    for d in dialogs {
        for gold in &d.gold {
            let history = model.relink(&d.history_before(gold.turn));
            if !history.turns.iter().any(|t| t.speaker == Speaker::Seeker) {
                unusable += 1;
                continue;
            }
            let ranked = model.recommend(&history, depth)?;
            recall.add(&ranked, gold.item);
            let agent = model.respond(&history, client)?;
            let reference = d.turn(gold.turn).map(|t| render_placeholders(&t.text, model.graph())).unwrap_or_default();
            let candidate = tokenize(&agent.response_text);
            bleu.add(&candidate, &tokenize(&reference));
            responses.push(candidate);
        }
    }
    if unusable > 0 {
        warn!(unusable, "gold turns without a preceding seeker utterance were not evaluated");
    }
    let report = MetricsReport {
        recall: recall.values().into_iter().collect::<BTreeMap<_, _>>(),
        bleu: bleu.score(),
        dist_2: distinct_n(&responses, 2),
        dist_3: distinct_n(&responses, 3),
        n_eval_turns: recall.turns(),
    };
    info!(turns = report.n_eval_turns, "evaluation finished");
    Ok(report)
}
