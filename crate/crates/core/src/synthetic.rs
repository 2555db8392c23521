//! Planted corpus generator.
//!
//! Items come in pairs that share one attribute nobody else has; the rest
//! are distractors without attributes. Every dialog mentions one paired item
//! and its gold recommendation is the partner. A small concept graph is
//! aligned to the attributes so ingestion exercises graph fusion.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::conversation::{DialogTurn, Speaker};
use crate::eval::dataset::placeholder_mentions;
use crate::eval::{write_redial, Dialog, EvalError, GoldLabel};
use crate::kg::{Entity, EntityId, EntityKind};
use crate::reviews::Review;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlantedConfig {
    pub items: usize,
    pub attributes: usize,
    pub train_dialogs: usize,
    pub test_dialogs: usize,
    pub reviews_per_item: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self { items: 50, attributes: 10, train_dialogs: 200, test_dialogs: 100, reviews_per_item: 3, seed: 7 }
    }
}

impl PlantedConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.attributes > THEMES.len() {
            return Err(format!("at most {} attributes are supported", THEMES.len()));
        }
        if 2 * self.attributes > self.items {
            return Err(format!("{} attributes need at least {} items", self.attributes, 2 * self.attributes));
        }
        if self.items > TITLE_A.len() * TITLE_B.len() {
            return Err(format!("at most {} items are supported", TITLE_A.len() * TITLE_B.len()));
        }
        if self.attributes == 0 {
            return Err("at least one attribute is needed".into());
        }
        Ok(())
    }
}

pub const HAS_THEME: &str = "has_theme";
pub const IS_A: &str = "is_a";

const THEMES: [&str; 16] = [
    "heist", "space opera", "time travel", "zombie", "courtroom", "samurai", "submarine", "haunted house",
    "boxing", "dinosaur", "espionage", "pirate", "vampire", "cooking", "chess", "mountaineering",
];

const TITLE_A: [&str; 12] =
    ["Silent", "Crimson", "Hollow", "Distant", "Broken", "Golden", "Last", "Northern", "Velvet", "Iron", "Paper", "Electric"];
const TITLE_B: [&str; 10] = ["Harbor", "Garden", "Signal", "Summer", "Kingdom", "Letters", "Frontier", "Echo", "River", "Circus"];

const OPENERS: [&str; 5] = [
    "Hi! I really enjoyed {m}. Can you suggest something similar?",
    "Hello there. I watched {m} last week and loved it.",
    "Hey, {m} is one of my favourites. What else would I like?",
    "I am looking for a film like {m}, any ideas?",
    "Good evening! Recently saw {m} and want more like it.",
];
const REPLIES: [&str; 4] = [
    "Sure, what did you like most about it?",
    "Great choice. Anything else you enjoy?",
    "Nice! Tell me a bit more about your taste.",
    "Happy to help. What mood are you in tonight?",
];
const FOLLOW_UPS: [&str; 4] = [
    "Mostly the story, honestly.",
    "I like it when a film keeps me guessing.",
    "Something for a quiet night in.",
    "The characters were wonderful.",
];
const RECOMMENDS: [&str; 4] = [
    "You should watch {g}.",
    "Then I think {g} is perfect for you.",
    "Try {g}, I am sure you will enjoy it.",
    "How about {g}?",
];
const FILLER: [&str; 24] = [
    "pacing", "score", "cast", "finale", "cinematography", "dialogue", "twist", "soundtrack", "villain", "sequel",
    "tension", "humour", "effects", "camera", "editing", "script", "lighting", "costumes", "runtime", "ending",
    "premise", "atmosphere", "performances", "scenes",
];

/// A generated corpus, ready to be written as ingestion inputs.
#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub entities: Vec<Entity>,
    /// `(head, relation label, tail)` in the item graph.
    pub triples: Vec<(EntityId, &'static str, EntityId)>,
    pub concept_entities: Vec<Entity>,
    pub concept_triples: Vec<(EntityId, &'static str, EntityId)>,
    /// `(item-graph attribute id, concept-graph id)`.
    pub alignment: Vec<(EntityId, EntityId)>,
    pub reviews: Vec<Review>,
    pub train: Vec<Dialog>,
    pub test: Vec<Dialog>,
    /// Each paired item with its partner.
    pub partners: Vec<(EntityId, EntityId)>,
}

/// Paths of a corpus written by [`PlantedCorpus::write`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusFiles {
    pub entities: PathBuf,
    pub triples: PathBuf,
    pub concept_entities: PathBuf,
    pub concept_triples: PathBuf,
    pub alignment: PathBuf,
    pub reviews: PathBuf,
    pub train: PathBuf,
    pub test: PathBuf,
}

impl CorpusFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            entities: dir.join("entities.jsonl"),
            triples: dir.join("triples.tsv"),
            concept_entities: dir.join("concept_entities.jsonl"),
            concept_triples: dir.join("concept_triples.tsv"),
            alignment: dir.join("alignment.tsv"),
            reviews: dir.join("reviews.jsonl"),
            train: dir.join("train.jsonl"),
            test: dir.join("test.jsonl"),
        }
    }
}

fn entity(id: u32, name: String, kind: EntityKind) -> Entity {
    Entity { id: EntityId(id), name, kind, aliases: vec![] }
}

fn dialog(rng: &mut ChaCha8Rng, id: String, mentioned: EntityId, gold: EntityId) -> Dialog {
    let mut texts: Vec<(Speaker, String)> = Vec::new();
    let m = format!("@{}", mentioned.0);
    texts.push((Speaker::Seeker, OPENERS.choose(rng).expect("non-empty").replace("{m}", &m)));
    if rng.random_bool(0.5) {
        texts.push((Speaker::Recommender, REPLIES.choose(rng).expect("non-empty").to_string()));
        texts.push((Speaker::Seeker, FOLLOW_UPS.choose(rng).expect("non-empty").to_string()));
    }
    texts.push((Speaker::Recommender, RECOMMENDS.choose(rng).expect("non-empty").replace("{g}", &format!("@{}", gold.0))));
    texts.push((Speaker::Seeker, "Thanks, I will check it out!".to_string()));
    let gold_turn = texts.len() - 1;
    let turns = texts
        .into_iter()
        .enumerate()
        .map(|(i, (speaker, text))| DialogTurn { speaker, mentions: placeholder_mentions(&text), text, turn_index: i + 1 })
        .collect();
    Dialog { conversation_id: id, turns, gold: vec![GoldLabel { turn: gold_turn, item: gold }] }
}

fn review_text(rng: &mut ChaCha8Rng, theme: Option<&str>) -> String {
    let mut words: Vec<&str> = FILLER.choose_multiple(rng, 6).copied().collect();
    if let Some(t) = theme {
        words.push(t);
        words.push(t);
    }
    words.shuffle(rng);
    format!("A {} film.", words.join(" "))
}

impl PlantedCorpus {
    pub fn generate(cfg: &PlantedConfig) -> Self {
        if let Err(e) = cfg.validate() {
            panic!("invalid planted corpus configuration: {e}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

        let mut titles: Vec<String> =
            TITLE_A.iter().flat_map(|a| TITLE_B.iter().map(move |b| format!("The {a} {b}"))).collect();
        titles.shuffle(&mut rng);
        let mut entities: Vec<Entity> =
            (0..cfg.items).map(|i| entity(i as u32, titles[i].clone(), EntityKind::Item)).collect();
        let mut order: Vec<u32> = (0..cfg.items as u32).collect();
        order.shuffle(&mut rng);

        let mut triples = Vec::new();
        let mut partners = Vec::new();
        let mut theme_of = vec![None; cfg.items];
        for a in 0..cfg.attributes {
            let attr = EntityId((cfg.items + a) as u32);
            entities.push(entity(attr.0, THEMES[a].to_string(), EntityKind::Attribute));
            let (x, y) = (EntityId(order[2 * a]), EntityId(order[2 * a + 1]));
            triples.push((x, HAS_THEME, attr));
            triples.push((y, HAS_THEME, attr));
            partners.push((x, y));
            partners.push((y, x));
            theme_of[x.0 as usize] = Some(THEMES[a]);
            theme_of[y.0 as usize] = Some(THEMES[a]);
        }
        partners.sort();

        // concept ids start at 0 in their own graph; 0 is the shared root
        let mut concept_entities = vec![entity(0, "story motif".into(), EntityKind::Concept)];
        let mut concept_triples = Vec::new();
        let mut alignment = Vec::new();
        for (a, theme) in THEMES.iter().enumerate().take(cfg.attributes) {
            let c = EntityId(a as u32 + 1);
            concept_entities.push(entity(c.0, format!("{theme} motif"), EntityKind::Concept));
            concept_triples.push((c, IS_A, EntityId(0)));
            alignment.push((EntityId((cfg.items + a) as u32), c));
        }

        let mut reviews = Vec::new();
        for (i, &theme) in theme_of.iter().enumerate().take(cfg.items) {
            for r in 0..cfg.reviews_per_item {
                reviews.push(Review {
                    item: EntityId(i as u32),
                    review_id: format!("i{i}-r{r}"),
                    text: review_text(&mut rng, theme),
                    helpful: rng.random_range(0..100),
                });
            }
        }

        let make = |n: usize, prefix: &str, rng: &mut ChaCha8Rng| -> Vec<Dialog> {
            (0..n)
                .map(|k| {
                    let &(m, g) = partners.choose(rng).expect("at least one pair");
                    dialog(rng, format!("{prefix}-{k:04}"), m, g)
                })
                .collect()
        };
        let train = make(cfg.train_dialogs, "train", &mut rng);
        let test = make(cfg.test_dialogs, "test", &mut rng);

        Self { entities, triples, concept_entities, concept_triples, alignment, reviews, train, test, partners }
    }

    pub fn write(&self, dir: &Path) -> Result<CorpusFiles, EvalError> {
        fs::create_dir_all(dir)?;
        let files = CorpusFiles::in_dir(dir);
        write_lines(&files.entities, self.entities.iter().map(json_line))?;
        write_lines(&files.concept_entities, self.concept_entities.iter().map(json_line))?;
        let tsv = |(h, r, t): &(EntityId, &str, EntityId)| format!("{h}\t{r}\t{t}");
        write_lines(&files.triples, std::iter::once("# head\trelation\ttail".to_string()).chain(self.triples.iter().map(tsv)))?;
        write_lines(&files.concept_triples, self.concept_triples.iter().map(tsv))?;
        write_lines(&files.alignment, self.alignment.iter().map(|(a, c)| format!("{a}\t{c}")))?;
        write_lines(&files.reviews, self.reviews.iter().map(json_line))?;
        for (path, dialogs) in [(&files.train, &self.train), (&files.test, &self.test)] {
            let mut w = BufWriter::new(fs::File::create(path)?);
            write_redial(dialogs, &mut w)?;
            w.flush()?;
        }
        Ok(files)
    }
}

fn json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> std::io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()
}
