//! Sessions, their append-only logs and per-turn pipeline execution.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use egcr_core::conversation::{DialogHistory, DialogTurn, Speaker};
use egcr_core::engine::Model;
use egcr_core::explainer::{CompletionClient, ExplanationSource};
use egcr_core::kg::Mention;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use tracing::{info, warn};

use crate::ServiceError;

/// Explanation as exposed over HTTP.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplanationView {
    pub text: String,
    pub source: ExplanationSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationView {
    pub entity_id: u32,
    pub name: String,
    pub score: f64,
    pub path: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub response_text: String,
    pub explanation: ExplanationView,
    pub recommendations: Vec<RecommendationView>,
    pub turn_index: usize,
}

/// One line of a transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptTurn {
    pub speaker: Speaker,
    pub text: String,
    pub turn_index: usize,
    #[serde(default)]
    pub mentions: Vec<Mention>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<ExplanationView>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recommendations: Option<Vec<RecommendationView>>,
}

impl TranscriptTurn {
    fn to_dialog_turn(&self) -> DialogTurn {
        DialogTurn {
            speaker: self.speaker,
            text: self.text.clone(),
            mentions: self.mentions.clone(),
            turn_index: self.turn_index,
        }
    }

    /// `SEEKER: text`, or `AGENT: text (explanation)`.
    pub fn render(&self) -> String {
        match (self.speaker, &self.explanation) {
            (Speaker::Seeker, _) => format!("SEEKER: {}", self.text),
            (Speaker::Recommender, Some(e)) => format!("AGENT: {} ({})", self.text, e.text),
            (Speaker::Recommender, None) => format!("AGENT: {}", self.text),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub turns: Vec<TranscriptTurn>,
    pub rendered: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum LogRecord {
    Created { session_id: String, created_at: u64 },
    Turn(TranscriptTurn),
}

#[derive(Debug)]
struct Session {
    id: String,
    created_at: u64,
    turns: Vec<TranscriptTurn>,
    log: PathBuf,
}

impl Session {
    fn history(&self) -> DialogHistory {
        DialogHistory::new(self.turns.iter().map(TranscriptTurn::to_dialog_turn).collect())
    }

    fn transcript(&self) -> Transcript {
        let rendered = self.turns.iter().map(|t| t.render() + "\n").collect();
        Transcript { turns: self.turns.clone(), rendered }
    }

    /// Appends records with a single write so an exchange lands whole.
    fn append(&self, records: &[LogRecord]) -> std::io::Result<()> {
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&self.log)?;
        f.write_all(&buf)?;
        f.sync_data()
    }

    fn replay(path: &Path) -> std::io::Result<Option<Self>> {
        let reader = BufReader::new(File::open(path)?);
        let mut session: Option<Session> = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match (serde_json::from_str::<LogRecord>(&line), session.as_mut()) {
                (Ok(LogRecord::Created { session_id, created_at }), None) => {
                    session = Some(Session { id: session_id, created_at, turns: Vec::new(), log: path.to_path_buf() });
                }
                (Ok(LogRecord::Turn(t)), Some(s)) => s.turns.push(t),
                (Ok(_), _) => warn!(log = %path.display(), line = i + 1, "out-of-order session record ignored"),
                (Err(e), _) => warn!(log = %path.display(), line = i + 1, error = %e, "unreadable session record ignored"),
            }
        }
        Ok(session)
    }
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn new_session_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

fn valid_session_id(id: &str) -> bool {
    id.len() == 32 && id.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

/// Owns every session. Turns within a session run one at a time; different
/// sessions proceed concurrently.
pub struct SessionManager {
    model: Option<Arc<Model>>,
    client: Arc<dyn CompletionClient>,
    dir: PathBuf,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
}

impl SessionManager {
    /// Opens the store under `data_dir`, replaying any existing session logs.
    pub fn open(
        data_dir: &Path,
        model: Option<Arc<Model>>,
        client: Arc<dyn CompletionClient>,
    ) -> std::io::Result<Self> {
        let dir = data_dir.join("sessions");
        fs::create_dir_all(&dir)?;
        let mut sessions = HashMap::new();
        let mut entries: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        entries.sort();
        for path in entries {
            match Session::replay(&path)? {
                Some(s) if valid_session_id(&s.id) => {
                    sessions.insert(s.id.clone(), Arc::new(Mutex::new(s)));
                }
                _ => warn!(log = %path.display(), "session log without a valid header skipped"),
            }
        }
        info!(restored = sessions.len(), dir = %dir.display(), "session store opened");
        Ok(Self { model, client, dir, sessions: RwLock::new(sessions) })
    }

    pub fn model_loaded(&self) -> bool {
        self.model.is_some()
    }

    pub fn len(&self) -> usize {
        self.sessions.read().expect("session index lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        self.sessions.read().expect("session index lock").get(id).cloned().ok_or(ServiceError::NotFound)
    }

    pub async fn create_session(&self) -> Result<String, ServiceError> {
        let id = loop {
            let candidate = new_session_id();
            if !self.sessions.read().expect("session index lock").contains_key(&candidate) {
                break candidate;
            }
        };
        let session = Session { id: id.clone(), created_at: now_secs(), turns: Vec::new(), log: self.dir.join(format!("{id}.jsonl")) };
        let header = LogRecord::Created { session_id: id.clone(), created_at: session.created_at };
        let session = tokio::task::spawn_blocking(move || session.append(&[header]).map(|()| session))
            .await
            .map_err(|e| ServiceError::Internal(e.to_string()))??;
        self.sessions.write().expect("session index lock").insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(id)
    }

    pub async fn post_turn(&self, id: &str, text: &str) -> Result<TurnResult, ServiceError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(ServiceError::Validation("text must not be empty".into()));
        }
        let session = self.get(id)?;
        let model = self.model.clone().ok_or(ServiceError::ModelUnavailable)?;
        let client = Arc::clone(&self.client);
        let text = text.to_string();
        let mut guard = session.lock_owned().await;
        tokio::task::spawn_blocking(move || run_turn(&mut guard, &model, client.as_ref(), &text))
            .await
            .map_err(|e| ServiceError::Internal(e.to_string()))?
    }

    pub async fn transcript(&self, id: &str) -> Result<Transcript, ServiceError> {
        let session = self.get(id)?;
        let guard = session.lock().await;
        Ok(guard.transcript())
    }

    pub async fn created_at(&self, id: &str) -> Result<u64, ServiceError> {
        let session = self.get(id)?;
        let guard = session.lock().await;
        Ok(guard.created_at)
    }
}

/// Link, encode, recommend, explain, then persist both turns.
fn run_turn(session: &mut Session, model: &Model, client: &dyn CompletionClient, text: &str) -> Result<TurnResult, ServiceError> {
    let mut history = session.history();
    let seeker_index = history.turns.last().map_or(1, |t| t.turn_index + 1);
    let seeker = DialogTurn { speaker: Speaker::Seeker, text: text.to_string(), mentions: model.link(text), turn_index: seeker_index };
    history.turns.push(seeker.clone());

    let agent = model.respond(&history, client)?;
    let g = model.graph();
    let recommendations: Vec<RecommendationView> = agent
        .recommendation
        .ranked
        .iter()
        .enumerate()
        .map(|(i, r)| RecommendationView {
            entity_id: r.entity.0,
            name: g.name_of(r.entity),
            score: r.score,
            path: if i == 0 { agent.path.render_hops(g) } else { Vec::new() },
        })
        .collect();
    let explanation = ExplanationView { text: agent.explanation.text.clone(), source: agent.explanation.source };
    let reply = agent.history_turn(seeker_index + 1, g);

    let seeker_record = TranscriptTurn {
        speaker: Speaker::Seeker,
        text: seeker.text,
        turn_index: seeker.turn_index,
        mentions: seeker.mentions,
        explanation: None,
        recommendations: None,
    };
    let agent_record = TranscriptTurn {
        speaker: Speaker::Recommender,
        text: reply.text,
        turn_index: reply.turn_index,
        mentions: reply.mentions,
        explanation: Some(explanation.clone()),
        recommendations: Some(recommendations.clone()),
    };
    session.append(&[LogRecord::Turn(seeker_record.clone()), LogRecord::Turn(agent_record.clone())])?;
    session.turns.push(seeker_record);
    session.turns.push(agent_record);
    let exchange = session.turns.iter().filter(|t| t.speaker == Speaker::Seeker).count();
    info!(session = %session.id, exchange, top = ?agent.recommendation.top(), "turn processed");
    Ok(TurnResult { response_text: agent.response_text, explanation, recommendations, turn_index: exchange })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_ids_are_unique_hex() {
        let ids: std::collections::HashSet<String> = (0..1000).map(|_| new_session_id()).collect();
        assert_eq!(ids.len(), 1000);
        assert!(ids.iter().all(|id| valid_session_id(id)));
        assert!(!valid_session_id("../../etc/passwd"));
    }
}
