//! ReDial-style dialog files.
//!
//! One JSON object per line:
//! `{"conversation_id", "messages": [{"role", "text"}], "gold": [{"turn", "item_id"}]}`.
//! `turn` is the 1-based position of a recommender message. Item mentions
//! appear inline as `@<id>`.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::EvalError;
use crate::conversation::{DialogHistory, DialogTurn, Speaker};
use crate::kg::{find_placeholders, EntityId, Mention};

/// Lines beyond this malformed fraction abort the load.
pub const MAX_MALFORMED_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GoldLabel {
    pub turn: usize,
    #[serde(rename = "item_id")]
    pub item: EntityId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialog {
    pub conversation_id: String,
    pub turns: Vec<DialogTurn>,
    pub gold: Vec<GoldLabel>,
}

impl Dialog {
    /// Turns strictly before `turn`, i.e. what the agent had seen when it
    /// produced that turn.
    pub fn history_before(&self, turn: usize) -> DialogHistory {
        DialogHistory::new(self.turns.iter().filter(|t| t.turn_index < turn).cloned().collect())
    }

    pub fn turn(&self, turn: usize) -> Option<&DialogTurn> {
        self.turns.iter().find(|t| t.turn_index == turn)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawMessage {
    role: Speaker,
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawDialog {
    conversation_id: String,
    messages: Vec<RawMessage>,
    #[serde(default)]
    gold: Vec<GoldLabel>,
}

/// Placeholder mentions, without registry checks.
pub fn placeholder_mentions(text: &str) -> Vec<Mention> {
    find_placeholders(text)
        .into_iter()
        .filter_map(|(start, end, id)| {
            id.map(|id| Mention { start, end, surface: text[start..end].to_string(), entity: EntityId(id) })
        })
        .collect()
}

fn convert(raw: RawDialog) -> Result<Dialog, String> {
    if raw.conversation_id.trim().is_empty() {
        return Err("empty conversation_id".into());
    }
    let turns: Vec<DialogTurn> = raw
        .messages
        .into_iter()
        .enumerate()
        .map(|(i, m)| DialogTurn { speaker: m.role, mentions: placeholder_mentions(&m.text), text: m.text, turn_index: i + 1 })
        .collect();
    let mut gold = raw.gold;
    gold.sort();
    for g in &gold {
        match turns.get(g.turn.wrapping_sub(1)) {
            Some(t) if t.speaker == Speaker::Recommender => {}
            Some(_) => return Err(format!("gold turn {} is not a recommender turn", g.turn)),
            None => return Err(format!("gold turn {} out of range", g.turn)),
        }
    }
    Ok(Dialog { conversation_id: raw.conversation_id, turns, gold })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedDialogs {
    pub dialogs: Vec<Dialog>,
    pub skipped: usize,
}

/// Parses dialogs, skipping malformed lines. Blank lines are ignored.
pub fn read_redial<R: BufRead>(reader: R, source_name: &str) -> Result<LoadedDialogs, EvalError> {
    let mut dialogs = Vec::new();
    let mut skipped = 0usize;
    let mut total = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let parsed = serde_json::from_str::<RawDialog>(&line).map_err(|e| e.to_string()).and_then(convert);
        match parsed {
            Ok(d) => dialogs.push(d),
            Err(message) => {
                skipped += 1;
                warn!(source = source_name, line = i + 1, %message, "skipping malformed dialog");
            }
        }
    }
    if total > 0 && skipped as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        return Err(EvalError::Malformed { source_name: source_name.to_string(), skipped, total });
    }
    Ok(LoadedDialogs { dialogs, skipped })
}

pub fn load_redial(path: &Path) -> Result<LoadedDialogs, EvalError> {
    let file = File::open(path).map_err(|e| EvalError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    read_redial(BufReader::new(file), &path.display().to_string())
}

pub fn write_redial<W: Write>(dialogs: &[Dialog], mut out: W) -> Result<(), EvalError> {
    for d in dialogs {
        let raw = RawDialog {
            conversation_id: d.conversation_id.clone(),
            messages: d.turns.iter().map(|t| RawMessage { role: t.speaker, text: t.text.clone() }).collect(),
            gold: d.gold.clone(),
        };
        serde_json::to_writer(&mut out, &raw).map_err(|e| EvalError::Io(e.into()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"{"conversation_id":"c1","messages":[{"role":"seeker","text":"I loved @1"},{"role":"recommender","text":"Try @2"},{"role":"seeker","text":"Seen it"},{"role":"recommender","text":"Then @3 or @4"}],"gold":[{"turn":2,"item_id":2},{"turn":4,"item_id":3}]}
{"conversation_id":"c2","messages":[{"role":"seeker","text":"Something funny?"},{"role":"recommender","text":"@7 is hilarious"}],"gold":[{"turn":2,"item_id":7}]}
"#;

    #[test]
    fn fixture_counts() {
        let loaded = read_redial(FIXTURE.as_bytes(), "fixture").unwrap();
        assert_eq!(loaded.dialogs.len(), 2);
        assert_eq!(loaded.skipped, 0);
        assert_eq!(loaded.dialogs.iter().map(|d| d.gold.len()).sum::<usize>(), 3);
        let d = &loaded.dialogs[0];
        assert_eq!(d.turns[0].mentions[0].entity, EntityId(1));
        assert_eq!(d.turns[3].mentions.len(), 2);
        assert_eq!(d.history_before(4).len(), 3);
    }

    #[test]
    fn missing_id_is_skipped() {
        let mut text = FIXTURE.repeat(5);
        text.push_str(r#"{"messages":[{"role":"seeker","text":"hi"}]}"#);
        text.push('\n');
        let loaded = read_redial(text.as_bytes(), "fixture").unwrap();
        assert_eq!(loaded.skipped, 1);
        assert_eq!(loaded.dialogs.len(), 10);
    }

    #[test]
    fn too_many_malformed_lines_abort() {
        let text = format!("{FIXTURE}not json\n");
        assert!(matches!(read_redial(text.as_bytes(), "fixture"), Err(EvalError::Malformed { skipped: 1, total: 3, .. })));
    }

    #[test]
    fn gold_must_point_at_recommender_turns() {
        let bad = r#"{"conversation_id":"c","messages":[{"role":"seeker","text":"hi"}],"gold":[{"turn":1,"item_id":2}]}"#;
        assert!(read_redial(bad.as_bytes(), "x").is_err());
    }

    #[test]
    fn round_trip() {
        let loaded = read_redial(FIXTURE.as_bytes(), "fixture").unwrap();
        let mut buf = Vec::new();
        write_redial(&loaded.dialogs, &mut buf).unwrap();
        let again = read_redial(buf.as_slice(), "again").unwrap();
        assert_eq!(again, loaded);
    }
}
