//! The assembled pipeline and its on-disk model directory.
//!
//! A model directory holds:
//!
//! | file | content |
//! |------|---------|
//! | `model.json` | [`ModelConfig`] |
//! | `graph.json` | the joint knowledge graph |
//! | `encoder.bin` | R-GCN weight checkpoint |
//! | `table.bin` | final, review-enriched entity table |
//! | `reviews.jsonl` | the selected reviews, used for prompts |
//! | `scorer.json` | [`ScorerFile`]: scorer parameters and fit summary |

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info};

use crate::conversation::{
    encode_history, ConversationError, DialogHistory, DialogTurn, Projection, RecurrentAggregator, Speaker,
    TextEncoder, TextEncoderSpec,
};
use crate::encoder::{
    encode_entities, init_weights, read_checkpoint, write_checkpoint, EncoderConfig, EncoderError, EntityTable,
    LayerWeights,
};
use crate::explainer::{
    build_prompt, generate_explanation, CompletionClient, ExplainError, Explanation, PromptConfig, PromptTemplate,
};
use crate::kg::{link_mentions, load_graph, merge_graphs, read_alignment, EntityId, KgError, KnowledgeGraph, Mention};
use crate::recommender::{
    candidate_items, extract_reasoning_path, fit, recommend_top_k, score_entities, score_features, FitConfig,
    ReasoningPath, RecommendError, Recommendation, ScorerParams, TrainingExample, DEFAULT_MAX_PATH_LEN,
};
use crate::reviews::{read_reviews, select_all, enrich_table, Review, ReviewError, ReviewSet, DEFAULT_ALPHA, DEFAULT_K_MAX};

pub const MODEL_FILE: &str = "model.json";
pub const GRAPH_FILE: &str = "graph.json";
pub const ENCODER_FILE: &str = "encoder.bin";
pub const TABLE_FILE: &str = "table.bin";
pub const REVIEWS_FILE: &str = "reviews.jsonl";
pub const SCORER_FILE: &str = "scorer.json";

pub const DEFAULT_TOP_K: usize = 3;
pub const DEFAULT_DIM: usize = 64;
pub const DEFAULT_TEXT_DIM: usize = 256;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Graph(#[from] KgError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Conversation(#[from] ConversationError),
    #[error(transparent)]
    Reviews(#[from] ReviewError),
    #[error(transparent)]
    Recommend(#[from] RecommendError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error("{path}: {message}")]
    Artifact { path: String, message: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

fn artifact(path: &Path, message: impl ToString) -> EngineError {
    EngineError::Artifact { path: path.display().to_string(), message: message.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub text_encoder: TextEncoderSpec,
    pub projection_seed: u64,
    pub aggregator_seed: u64,
    pub alpha: f64,
    pub review_k_max: usize,
    pub max_path_len: usize,
    pub top_k: usize,
    #[serde(default)]
    pub prompt: PromptConfig,
    /// Overrides the bundled explanation template.
    #[serde(default)]
    pub template: Option<PromptTemplate>,
}

impl ModelConfig {
    /// Defaults with every seed derived from `seed`.
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            encoder: EncoderConfig::new(dim, seed),
            text_encoder: TextEncoderSpec::Hashing { seed, dim: DEFAULT_TEXT_DIM },
            projection_seed: seed.wrapping_add(1),
            aggregator_seed: seed.wrapping_add(2),
            alpha: DEFAULT_ALPHA,
            review_k_max: DEFAULT_K_MAX,
            max_path_len: DEFAULT_MAX_PATH_LEN,
            top_k: DEFAULT_TOP_K,
            prompt: PromptConfig::default(),
            template: None,
        }
    }

    fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(EngineError::Contract(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.top_k == 0 || self.review_k_max == 0 || self.max_path_len == 0 {
            return Err(EngineError::Contract("top_k, review_k_max and max_path_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub config: FitConfig,
    pub examples: usize,
    pub skipped: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerFile {
    pub params: ScorerParams,
    #[serde(default)]
    pub fit: Option<FitSummary>,
}

/// What the agent does on one turn.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentTurn {
    pub recommendation: Recommendation,
    pub path: ReasoningPath,
    pub prompt: String,
    pub explanation: Explanation,
    /// The recommender utterance stored in the dialog history.
    pub utterance: String,
    /// Utterance followed by the parenthesized explanation.
    pub response_text: String,
}

impl AgentTurn {
    /// The recommender turn to append to the history: the utterance, with
    /// the recommended item marked as mentioned.
    pub fn history_turn(&self, turn_index: usize, g: &KnowledgeGraph) -> DialogTurn {
        let mut turn = DialogTurn::new(Speaker::Recommender, self.utterance.clone(), turn_index);
        if let Some(top) = self.recommendation.top() {
            let name = g.name_of(top);
            if let Some(start) = self.utterance.find(&name) {
                turn.mentions.push(Mention { start, end: start + name.len(), surface: name, entity: top });
            }
        }
        turn
    }
}

pub fn compose_response(utterance: &str, explanation: &str) -> String {
    format!("{utterance} ({explanation})")
}

pub struct Model {
    config: ModelConfig,
    graph: KnowledgeGraph,
    weights: Vec<LayerWeights>,
    table: EntityTable,
    reviews: BTreeMap<EntityId, ReviewSet>,
    scorer: ScorerFile,
    text_encoder: Box<dyn TextEncoder>,
    projection: Projection,
    aggregator: RecurrentAggregator,
    template: PromptTemplate,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("entities", &self.graph.num_entities())
            .field("relations", &self.graph.num_relations())
            .field("dim", &self.table.dim())
            .field("text_encoder", &self.text_encoder.name())
            .finish_non_exhaustive()
    }
}

impl Model {
    /// Encodes `graph`, enriches items with reviews and starts from an
    /// unfitted scorer (zero bias, beta 1).
    pub fn build(graph: KnowledgeGraph, raw_reviews: &[Review], config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let encoding_graph = graph.with_inverse_relations()?;
        let weights = init_weights(&encoding_graph, &config.encoder);
        let encoded = encode_entities(&encoding_graph, &config.encoder, &weights, None)?;
        let reviews = select_all(raw_reviews, config.review_k_max)?;
        let (text_encoder, projection, aggregator) = Self::text_stack(&config)?;
        let table = enrich_table(&encoded, &graph, &reviews, text_encoder.as_ref(), &projection, config.alpha)?;
        let scorer = ScorerFile { params: ScorerParams::for_graph(&graph, 1.0), fit: None };
        let template = resolve_template(&config)?;
        info!(
            entities = graph.num_entities(),
            relations = graph.num_relations(),
            triples = graph.num_triples(),
            reviewed_items = reviews.len(),
            "model built"
        );
        Ok(Self { config, graph, weights, table, reviews, scorer, text_encoder, projection, aggregator, template })
    }

    fn text_stack(config: &ModelConfig) -> Result<(Box<dyn TextEncoder>, Projection, RecurrentAggregator)> {
        let text_encoder = config.text_encoder.build();
        let dim = config.encoder.dim;
        let projection = Projection::seeded(text_encoder.dim(), dim, config.projection_seed);
        let aggregator = RecurrentAggregator::seeded(dim, config.aggregator_seed);
        Ok((text_encoder, projection, aggregator))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &KnowledgeGraph {
        &self.graph
    }

    pub fn table(&self) -> &EntityTable {
        &self.table
    }

    pub fn weights(&self) -> &[LayerWeights] {
        &self.weights
    }

    pub fn params(&self) -> &ScorerParams {
        &self.scorer.params
    }

    pub fn fit_summary(&self) -> Option<&FitSummary> {
        self.scorer.fit.as_ref()
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    pub fn reviews_for(&self, item: EntityId) -> ReviewSet {
        self.reviews.get(&item).cloned().unwrap_or_default()
    }

    pub fn set_params(&mut self, params: ScorerParams) -> Result<()> {
        if params.items != candidate_items(&self.graph) {
            return Err(EngineError::Contract("scorer parameters do not cover the graph's items".into()));
        }
        self.scorer = ScorerFile { params, fit: None };
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_json(&dir.join(MODEL_FILE), &self.config)?;
        write_json(&dir.join(GRAPH_FILE), &self.graph)?;
        write_json(&dir.join(SCORER_FILE), &self.scorer)?;
        let mut w = BufWriter::new(File::create(dir.join(ENCODER_FILE))?);
        write_checkpoint(&mut w, &self.config.encoder, &self.weights)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join(TABLE_FILE))?);
        self.table.write_to(&mut w)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join(REVIEWS_FILE))?);
        for r in self.reviews.values().flat_map(|rs| &rs.reviews) {
            serde_json::to_writer(&mut w, r).map_err(|e| artifact(&dir.join(REVIEWS_FILE), e))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_scorer(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(SCORER_FILE), &self.scorer)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(artifact(dir, "model directory does not exist"));
        }
        let config: ModelConfig = read_json(&dir.join(MODEL_FILE))?;
        config.validate()?;
        let graph: KnowledgeGraph = read_json(&dir.join(GRAPH_FILE))?;
        let scorer: ScorerFile = read_json(&dir.join(SCORER_FILE))?;

        let path = dir.join(ENCODER_FILE);
        let ckpt = read_checkpoint(BufReader::new(open(&path)?)).map_err(|e| artifact(&path, e))?;
        let expected_relations = graph.with_inverse_relations()?.num_relations();
        if ckpt.dim != config.encoder.dim || ckpt.weights.len() != config.encoder.layers || ckpt.relations != expected_relations
        {
            return Err(artifact(&path, "checkpoint shape does not match model.json and graph.json"));
        }

        let path = dir.join(TABLE_FILE);
        let table = EntityTable::read_from(BufReader::new(open(&path)?)).map_err(|e| artifact(&path, e))?;
        let graph_ids: Vec<EntityId> = graph.entities().iter().map(|e| e.id).collect();
        if table.ids() != graph_ids.as_slice() || table.dim() != config.encoder.dim {
            return Err(artifact(&path, "entity table does not match graph.json"));
        }
        if scorer.params.items != candidate_items(&graph) {
            return Err(artifact(&dir.join(SCORER_FILE), "scorer items do not match graph.json"));
        }

        let path = dir.join(REVIEWS_FILE);
        let raw = read_reviews(BufReader::new(open(&path)?)).map_err(|e| artifact(&path, e))?;
        let reviews = select_all(&raw, config.review_k_max)?;

        let (text_encoder, projection, aggregator) = Self::text_stack(&config)?;
        let template = resolve_template(&config)?;
        debug!(dir = %dir.display(), "model loaded");
        Ok(Self {
            config,
            graph,
            weights: ckpt.weights,
            table,
            reviews,
            scorer,
            text_encoder,
            projection,
            aggregator,
            template,
        })
    }

    pub fn link(&self, text: &str) -> Vec<Mention> {
        link_mentions(text, &self.graph).mentions
    }

    /// Re-links every turn against this model's graph.
    pub fn relink(&self, history: &DialogHistory) -> DialogHistory {
        let turns = history
            .turns
            .iter()
            .map(|t| DialogTurn { mentions: self.link(&t.text), ..t.clone() })
            .collect();
        DialogHistory::new(turns)
    }

    pub fn mentions(history: &DialogHistory) -> BTreeSet<EntityId> {
        history.turns.iter().flat_map(|t| t.mentions.iter().map(|m| m.entity)).collect()
    }

    fn state(&self, history: &DialogHistory) -> Result<ndarray::Array1<f64>> {
        let state = encode_history(history, self.text_encoder.as_ref(), &self.projection, &self.aggregator)?;
        Ok(state.vector)
    }

    /// Top-`k` items for an already linked history.
    pub fn recommend(&self, history: &DialogHistory, k: usize) -> Result<Recommendation> {
        let state = self.state(history)?;
        let mentions = Self::mentions(history);
        let scores = score_entities(state.view(), &mentions, &self.table, &self.scorer.params)?;
        let mut rec = recommend_top_k(&scores, k);
        rec.query_turn = history.turns.last().map_or(0, |t| t.turn_index + 1);
        Ok(rec)
    }

    pub fn reasoning_path(&self, history: &DialogHistory, item: EntityId) -> ReasoningPath {
        extract_reasoning_path(&self.graph, &Self::mentions(history), item, self.config.max_path_len)
    }

    /// Recommends, extracts the path for the top item and explains it.
    pub fn respond(&self, history: &DialogHistory, client: &dyn CompletionClient) -> Result<AgentTurn> {
        let recommendation = self.recommend(history, self.config.top_k)?;
        let Some(top) = recommendation.top() else {
            return Err(EngineError::Contract("no recommendable item left".into()));
        };
        let path = self.reasoning_path(history, top);
        let reviews = self.reviews_for(top);
        let prompt =
            build_prompt(history, &recommendation, &path, &reviews, &self.template, &self.graph, &self.config.prompt)?;
        let explanation = generate_explanation(&prompt, client, &recommendation, &path, &self.graph);
        let utterance = format!("You should watch {}.", self.graph.name_of(top));
        let response_text = compose_response(&utterance, &explanation.text);
        Ok(AgentTurn { recommendation, path, prompt, explanation, utterance, response_text })
    }

    /// Training examples from gold turns. Turns that cannot be used (no
    /// seeker utterance yet, unknown or non-item gold, gold already
    /// mentioned) are counted in the second value.
    pub fn training_examples(&self, dialogs: &[crate::eval::Dialog]) -> Result<(Vec<TrainingExample>, usize)> {
        let items = &self.scorer.params.items;
        let position: BTreeMap<EntityId, usize> = items.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        let mut examples = Vec::new();
        let mut skipped = 0;
        for d in dialogs {
            for gold in &d.gold {
                let history = self.relink(&d.history_before(gold.turn));
                let Some(&gold_pos) = position.get(&gold.item) else {
                    skipped += 1;
                    continue;
                };
                if !history.turns.iter().any(|t| t.speaker == Speaker::Seeker) {
                    skipped += 1;
                    continue;
                }
                let mentions = Self::mentions(&history);
                if self.scorer.params.mask_mentioned && mentions.contains(&gold.item) {
                    skipped += 1;
                    continue;
                }
                let state = self.state(&history)?;
                let features = score_features(state.view(), &mentions, &self.table, items)?;
                examples.push(TrainingExample { features, gold: gold_pos });
            }
        }
        Ok((examples, skipped))
    }

    /// Fits bias and beta on `dialogs` with the encoder frozen.
    pub fn fit(&mut self, dialogs: &[crate::eval::Dialog], cfg: &FitConfig) -> Result<&FitSummary> {
        let (examples, skipped) = self.training_examples(dialogs)?;
        let initial = ScorerParams::new(self.scorer.params.items.clone(), cfg.init_beta, self.scorer.params.mask_mentioned);
        let outcome = fit(&examples, initial, cfg)?;
        let summary = FitSummary {
            config: cfg.clone(),
            examples: examples.len(),
            skipped,
            initial_loss: outcome.losses.first().copied().unwrap_or(f64::NAN),
            final_loss: outcome.losses.last().copied().unwrap_or(f64::NAN),
        };
        info!(
            examples = summary.examples,
            skipped,
            initial_loss = summary.initial_loss,
            final_loss = summary.final_loss,
            beta = outcome.params.beta,
            "scorer fitted"
        );
        self.scorer = ScorerFile { params: outcome.params, fit: Some(summary) };
        Ok(self.scorer.fit.as_ref().expect("just set"))
    }
}

/// Input files for [`ingest`]. The concept graph and alignment are optional
/// but an alignment needs a concept graph.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestSources {
    pub triples: PathBuf,
    pub entities: PathBuf,
    pub concept_triples: Option<PathBuf>,
    pub concept_entities: Option<PathBuf>,
    pub alignment: Option<PathBuf>,
    pub reviews: Option<PathBuf>,
}

fn reader(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(open(path)?))
}

/// Loads the item graph (fused with the concept graph when given), reads
/// reviews and builds a model.
pub fn ingest(src: &IngestSources, config: ModelConfig) -> Result<Model> {
    let item_graph = load_graph(reader(&src.triples)?, reader(&src.entities)?)?;
    let graph = match (&src.concept_triples, &src.concept_entities) {
        (Some(t), Some(e)) => {
            let concept_graph = load_graph(reader(t)?, reader(e)?)?;
            let alignment = match &src.alignment {
                Some(a) => read_alignment(reader(a)?, &a.display().to_string())?,
                None => Vec::new(),
            };
            let merged = merge_graphs(&item_graph, &concept_graph, &alignment)?;
            info!(concept_offset = merged.concept_offset, aligned = alignment.len(), "graphs fused");
            merged.graph
        }
        (None, None) => {
            if src.alignment.is_some() {
                return Err(EngineError::Contract("an alignment file needs concept triples and entities".into()));
            }
            item_graph
        }
        _ => return Err(EngineError::Contract("concept triples and concept entities go together".into())),
    };
    let reviews = match &src.reviews {
        Some(p) => read_reviews(reader(p)?).map_err(|e| artifact(p, e))?,
        None => Vec::new(),
    };
    Model::build(graph, &reviews, config)
}

fn resolve_template(config: &ModelConfig) -> Result<PromptTemplate> {
    match &config.template {
        Some(t) => Ok(PromptTemplate::new(t.name(), t.body())?),
        None => Ok(PromptTemplate::default_template()),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| artifact(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| artifact(path, e))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_reader(BufReader::new(open(path)?)).map_err(|e| artifact(path, e))
}
