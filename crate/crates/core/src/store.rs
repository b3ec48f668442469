//! Append-only session transcripts and deterministic replay.
//!
//! On disk each session owns `sessions/<id>.log` (one JSON event per line,
//! fields `seq`, `ts`, `kind`, `payload`), a `<id>.meta` header and a
//! `<id>.state` snapshot of the latest committed state. Events are never
//! rewritten. Transcripts hold raw player text and may contain personal
//! details.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::game::{
    apply_decision, apply_ending, apply_player_input, apply_turn, delta_events, new_session,
    record_assistant_reply, ClampReason, GameError, GameState, Phase,
};
use crate::protocol::{
    assemble_system_prompt, parse_turn_response, PersonaProfile, PromptBundle, PromptError,
    PromptVersion, TurnResponse,
};
use crate::provider::AttemptRecord;
use crate::script::{EndingId, ScenarioScript};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload")]
pub enum EventBody {
    PlayerInput {
        text: String,
    },
    RawModelReply {
        attempt: u32,
        text: String,
    },
    ParsedTurn {
        response: TurnResponse,
        /// SHA-256 of each raw reply of the turn, in attempt order.
        reply_digests: Vec<String>,
    },
    ClueDelivered {
        clue_id: u32,
    },
    SceneAdvanced {
        scene_id: u32,
        from: Phase,
        to: Phase,
    },
    DecisionMade {
        scene_id: u32,
        option_id: String,
        consequence_text: String,
    },
    EndingChosen {
        option_id: EndingId,
        epilogue_text: String,
    },
    Clamped {
        reasons: Vec<ClampReason>,
    },
    /// A turn that failed and left the state untouched.
    Error {
        player_text: String,
        message: String,
        #[serde(default)]
        raw_replies: Vec<AttemptRecord>,
    },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::PlayerInput { .. } => "PlayerInput",
            EventBody::RawModelReply { .. } => "RawModelReply",
            EventBody::ParsedTurn { .. } => "ParsedTurn",
            EventBody::ClueDelivered { .. } => "ClueDelivered",
            EventBody::SceneAdvanced { .. } => "SceneAdvanced",
            EventBody::DecisionMade { .. } => "DecisionMade",
            EventBody::EndingChosen { .. } => "EndingChosen",
            EventBody::Clamped { .. } => "Clamped",
            EventBody::Error { .. } => "Error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEvent {
    pub seq: u64,
    pub ts: DateTime<Utc>,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub session_id: String,
    pub script_id: String,
    pub script_hash: String,
    pub prompt_version: PromptVersion,
    pub persona_ref: String,
    pub created_at: DateTime<Utc>,
}

impl SessionMeta {
    pub fn new(
        session_id: &str,
        script_id: &str,
        script: &ScenarioScript,
        prompt_version: PromptVersion,
    ) -> Self {
        SessionMeta {
            session_id: session_id.to_string(),
            script_id: script_id.to_string(),
            script_hash: script.content_hash(),
            prompt_version,
            persona_ref: script.persona_ref.clone(),
            created_at: Utc::now(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub script_hash: String,
    pub prompt_version: PromptVersion,
    pub events: Vec<TranscriptEvent>,
    pub final_state: Option<GameState>,
}

impl SessionRecord {
    /// Player inputs in log order.
    pub fn player_inputs(&self) -> impl Iterator<Item = (u64, &str)> {
        self.events.iter().filter_map(|e| match &e.body {
            EventBody::PlayerInput { text } => Some((e.seq, text.as_str())),
            _ => None,
        })
    }

    /// Raw model replies in log order, including failed turns.
    pub fn raw_replies(&self) -> Vec<String> {
        let mut out = Vec::new();
        for e in &self.events {
            match &e.body {
                EventBody::RawModelReply { text, .. } => out.push(text.clone()),
                EventBody::Error { raw_replies, .. } => {
                    out.extend(raw_replies.iter().map(|a| a.raw_text.clone()))
                }
                _ => {}
            }
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("session `{0}` already exists")]
    SessionExists(String),
    #[error("storage error: {0}")]
    Storage(#[from] std::io::Error),
    #[error("corrupt record in session `{session}` at line {line}: {reason}")]
    Corrupt {
        session: String,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Replay(#[from] Box<ReplayError>),
}

/// Hex SHA-256 of a raw reply, as stored in `ParsedTurn`.
pub fn reply_digest(raw: &str) -> String {
    hex::encode(Sha256::digest(raw.as_bytes()))
}

/// Parses a line-delimited event stream.
pub fn import_events(text: &str) -> Result<Vec<TranscriptEvent>, StoreError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| StoreError::Corrupt {
                session: String::new(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

/// One JSON object per line, ordered by seq.
pub fn export_events(events: &[TranscriptEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("event serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Default)]
struct MemorySession {
    meta: Option<SessionMeta>,
    log: String,
    state: Option<String>,
}

#[derive(Debug)]
enum Backend {
    Dir(PathBuf),
    Memory(Mutex<HashMap<String, MemorySession>>),
}

/// Transcript storage. Assumes one writer per session.
#[derive(Debug)]
pub struct SessionStore {
    backend: Backend,
    next_seq: Mutex<HashMap<String, u64>>,
}

fn valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl SessionStore {
    /// Opens (creating if needed) `<data_dir>/sessions`.
    pub fn open(data_dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = data_dir.as_ref().join("sessions");
        fs::create_dir_all(&dir)?;
        Ok(SessionStore {
            backend: Backend::Dir(dir),
            next_seq: Mutex::new(HashMap::new()),
        })
    }

    pub fn in_memory() -> Self {
        SessionStore {
            backend: Backend::Memory(Mutex::new(HashMap::new())),
            next_seq: Mutex::new(HashMap::new()),
        }
    }

    pub fn sessions_dir(&self) -> Option<&Path> {
        match &self.backend {
            Backend::Dir(d) => Some(d),
            Backend::Memory(_) => None,
        }
    }

    fn path(&self, id: &str, ext: &str) -> Result<PathBuf, StoreError> {
        if !valid_session_id(id) {
            return Err(StoreError::UnknownSession(id.to_string()));
        }
        match &self.backend {
            Backend::Dir(d) => Ok(d.join(format!("{id}.{ext}"))),
            Backend::Memory(_) => unreachable!("memory backend has no paths"),
        }
    }

    pub fn create(&self, meta: SessionMeta) -> Result<(), StoreError> {
        let id = meta.session_id.clone();
        match &self.backend {
            Backend::Dir(_) => {
                let meta_path = self.path(&id, "meta")?;
                let mut f = OpenOptions::new()
                    .write(true)
                    .create_new(true)
                    .open(&meta_path)
                    .map_err(|e| match e.kind() {
                        std::io::ErrorKind::AlreadyExists => StoreError::SessionExists(id.clone()),
                        _ => e.into(),
                    })?;
                f.write_all(serde_json::to_string_pretty(&meta).unwrap().as_bytes())?;
                f.sync_all()?;
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(self.path(&id, "log")?)?;
            }
            Backend::Memory(m) => {
                if !valid_session_id(&id) {
                    return Err(StoreError::UnknownSession(id));
                }
                let mut m = m.lock().unwrap();
                if m.contains_key(&id) {
                    return Err(StoreError::SessionExists(id));
                }
                m.insert(
                    id.clone(),
                    MemorySession {
                        meta: Some(meta),
                        ..Default::default()
                    },
                );
            }
        }
        self.next_seq.lock().unwrap().insert(id, 1);
        Ok(())
    }

    pub fn exists(&self, id: &str) -> bool {
        match &self.backend {
            Backend::Dir(_) => self.path(id, "meta").map(|p| p.exists()).unwrap_or(false),
            Backend::Memory(m) => m.lock().unwrap().contains_key(id),
        }
    }

    pub fn meta(&self, id: &str) -> Result<SessionMeta, StoreError> {
        match &self.backend {
            Backend::Dir(_) => {
                let text = fs::read_to_string(self.path(id, "meta")?).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => StoreError::UnknownSession(id.to_string()),
                    _ => e.into(),
                })?;
                serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
                    session: id.to_string(),
                    line: e.line(),
                    reason: e.to_string(),
                })
            }
            Backend::Memory(m) => m
                .lock()
                .unwrap()
                .get(id)
                .and_then(|s| s.meta.clone())
                .ok_or_else(|| StoreError::UnknownSession(id.to_string())),
        }
    }

    /// Session ids in ascending order.
    pub fn list(&self) -> Result<Vec<String>, StoreError> {
        let mut ids: Vec<String> = match &self.backend {
            Backend::Dir(d) => fs::read_dir(d)?
                .filter_map(|e| e.ok())
                .filter_map(|e| {
                    let p = e.path();
                    (p.extension()? == "meta").then(|| p.file_stem()?.to_str().map(String::from))?
                })
                .collect(),
            Backend::Memory(m) => m.lock().unwrap().keys().cloned().collect(),
        };
        ids.sort();
        Ok(ids)
    }

    fn read_log(&self, id: &str) -> Result<String, StoreError> {
        if !self.exists(id) {
            return Err(StoreError::UnknownSession(id.to_string()));
        }
        match &self.backend {
            Backend::Dir(_) => match fs::read_to_string(self.path(id, "log")?) {
                Ok(s) => Ok(s),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(String::new()),
                Err(e) => Err(e.into()),
            },
            Backend::Memory(m) => Ok(m.lock().unwrap().get(id).map(|s| s.log.clone()).unwrap_or_default()),
        }
    }

    fn recover_next_seq(&self, id: &str) -> Result<u64, StoreError> {
        let log = self.read_log(id)?;
        if !log.is_empty() && !log.ends_with('\n') {
            return Err(StoreError::Corrupt {
                session: id.to_string(),
                line: log.lines().count(),
                reason: "log ends with a partial record".into(),
            });
        }
        let last = log.lines().rev().find(|l| !l.trim().is_empty());
        let max = match last {
            Some(line) => {
                #[derive(Deserialize)]
                struct SeqOnly {
                    seq: u64,
                }
                serde_json::from_str::<SeqOnly>(line)
                    .map_err(|e| StoreError::Corrupt {
                        session: id.to_string(),
                        line: log.lines().count(),
                        reason: e.to_string(),
                    })?
                    .seq
            }
            None => 0,
        };
        Ok(max + 1)
    }

    /// Appends one event and returns its seq.
    pub fn append_event(&self, id: &str, body: EventBody) -> Result<u64, StoreError> {
        Ok(self.append_events(id, vec![body])?[0])
    }

    /// Appends events in a single write and returns their seqs.
    pub fn append_events(&self, id: &str, bodies: Vec<EventBody>) -> Result<Vec<u64>, StoreError> {
        if bodies.is_empty() {
            return Ok(Vec::new());
        }
        let mut next_seq = self.next_seq.lock().unwrap();
        let first = match next_seq.get(id) {
            Some(&n) => n,
            None => self.recover_next_seq(id)?,
        };
        let ts = Utc::now();
        let mut text = String::new();
        let mut seqs = Vec::with_capacity(bodies.len());
        for (i, body) in bodies.into_iter().enumerate() {
            let seq = first + i as u64;
            let event = TranscriptEvent { seq, ts, body };
            text.push_str(&serde_json::to_string(&event).expect("event serializes"));
            text.push('\n');
            seqs.push(seq);
        }
        match &self.backend {
            Backend::Dir(_) => {
                let mut f = OpenOptions::new().append(true).open(self.path(id, "log")?)?;
                f.write_all(text.as_bytes())?;
                f.sync_data()?;
            }
            Backend::Memory(m) => {
                let mut m = m.lock().unwrap();
                let s = m
                    .get_mut(id)
                    .ok_or_else(|| StoreError::UnknownSession(id.to_string()))?;
                s.log.push_str(&text);
            }
        }
        next_seq.insert(id.to_string(), first + seqs.len() as u64);
        Ok(seqs)
    }

    /// Writes the latest state snapshot (replaced, not appended).
    pub fn save_state(&self, id: &str, state: &GameState) -> Result<(), StoreError> {
        let json = state.canonical_json();
        match &self.backend {
            Backend::Dir(_) => {
                let path = self.path(id, "state")?;
                let tmp = self.path(id, "state.tmp")?;
                fs::write(&tmp, json)?;
                fs::rename(tmp, path)?;
            }
            Backend::Memory(m) => {
                let mut m = m.lock().unwrap();
                let s = m
                    .get_mut(id)
                    .ok_or_else(|| StoreError::UnknownSession(id.to_string()))?;
                s.state = Some(json);
            }
        }
        Ok(())
    }

    fn load_state(&self, id: &str) -> Result<Option<GameState>, StoreError> {
        let text = match &self.backend {
            Backend::Dir(_) => match fs::read_to_string(self.path(id, "state")?) {
                Ok(t) => Some(t),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
                Err(e) => return Err(e.into()),
            },
            Backend::Memory(m) => m.lock().unwrap().get(id).and_then(|s| s.state.clone()),
        };
        text.map(|t| {
            GameState::from_canonical_json(&t).map_err(|e| StoreError::Corrupt {
                session: id.to_string(),
                line: e.line(),
                reason: e.to_string(),
            })
        })
        .transpose()
    }

    pub fn events(&self, id: &str) -> Result<Vec<TranscriptEvent>, StoreError> {
        import_events(&self.read_log(id)?).map_err(|e| match e {
            StoreError::Corrupt { line, reason, .. } => StoreError::Corrupt {
                session: id.to_string(),
                line,
                reason,
            },
            e => e,
        })
    }

    /// The session log as exported text: one event per line, ordered by seq.
    pub fn export_session(&self, id: &str) -> Result<String, StoreError> {
        Ok(export_events(&self.events(id)?))
    }

    pub fn load_record(&self, id: &str) -> Result<SessionRecord, StoreError> {
        let meta = self.meta(id)?;
        Ok(SessionRecord {
            session_id: meta.session_id,
            script_hash: meta.script_hash,
            prompt_version: meta.prompt_version,
            events: self.events(id)?,
            final_state: self.load_state(id)?,
        })
    }
}

/// Reads a record from a `.log` file and its sibling `.meta` file.
pub fn load_record_from_log(log_path: impl AsRef<Path>) -> Result<SessionRecord, StoreError> {
    let log_path = log_path.as_ref();
    let meta_path = log_path.with_extension("meta");
    let meta_text = fs::read_to_string(&meta_path)?;
    let meta: SessionMeta = serde_json::from_str(&meta_text).map_err(|e| StoreError::Corrupt {
        session: meta_path.display().to_string(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    let events = import_events(&fs::read_to_string(log_path)?)?;
    let state_path = log_path.with_extension("state");
    let final_state = match fs::read_to_string(&state_path) {
        Ok(t) => GameState::from_canonical_json(&t).ok(),
        Err(_) => None,
    };
    Ok(SessionRecord {
        session_id: meta.session_id,
        script_hash: meta.script_hash,
        prompt_version: meta.prompt_version,
        events,
        final_state,
    })
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("replay diverged at seq {seq}: {detail}")]
    Divergence { seq: u64, detail: String },
    #[error("record was made with a different script")]
    ScriptMismatch,
    #[error("no bundled persona named `{0}`")]
    UnknownPersona(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Game(#[from] GameError),
}

/// Re-runs a recorded session against `script`, using the bundled persona
/// the script names.
pub fn replay(record: &SessionRecord, script: &ScenarioScript) -> Result<GameState, ReplayError> {
    let persona = PersonaProfile::by_ref(&script.persona_ref)
        .ok_or_else(|| ReplayError::UnknownPersona(script.persona_ref.clone()))?;
    let bundle = assemble_system_prompt(&persona, script, record.prompt_version)?;
    replay_with_bundle(record, script, &bundle)
}

/// Re-parses every recorded reply, re-applies every transition, and checks
/// each recomputed effect against the recorded one.
pub fn replay_with_bundle(
    record: &SessionRecord,
    script: &ScenarioScript,
    bundle: &PromptBundle,
) -> Result<GameState, ReplayError> {
    if record.script_hash != script.content_hash() {
        return Err(ReplayError::ScriptMismatch);
    }
    let mut state = new_session(script, bundle)?;
    let events = &record.events;
    let diverge = |seq: u64, detail: String| ReplayError::Divergence { seq, detail };

    let mut i = 0;
    while i < events.len() {
        let event = &events[i];
        match &event.body {
            EventBody::PlayerInput { text } => {
                let after_input = apply_player_input(&state, text)
                    .map_err(|e| diverge(event.seq, e.to_string()))?;
                i += 1;
                let mut raws: Vec<(u64, &str)> = Vec::new();
                while let Some(EventBody::RawModelReply { text, .. }) = events.get(i).map(|e| &e.body) {
                    raws.push((events[i].seq, text));
                    i += 1;
                }
                let parsed_event = events
                    .get(i)
                    .ok_or_else(|| diverge(event.seq, "turn has no ParsedTurn event".into()))?;
                let EventBody::ParsedTurn {
                    response: recorded,
                    reply_digests,
                } = &parsed_event.body
                else {
                    return Err(diverge(
                        parsed_event.seq,
                        format!("expected ParsedTurn, found {}", parsed_event.body.kind()),
                    ));
                };
                if raws.len() != reply_digests.len() {
                    return Err(diverge(
                        parsed_event.seq,
                        format!("{} raw replies, {} digests", raws.len(), reply_digests.len()),
                    ));
                }
                for ((seq, text), digest) in raws.iter().zip(reply_digests) {
                    if &reply_digest(text) != digest {
                        return Err(diverge(*seq, "raw reply differs from its digest".into()));
                    }
                }
                let (last, rejected) = raws
                    .split_last()
                    .ok_or_else(|| diverge(parsed_event.seq, "turn has no raw reply".into()))?;
                for (seq, text) in rejected {
                    if parse_turn_response(text).is_ok() {
                        return Err(diverge(*seq, "rejected reply now parses".into()));
                    }
                }
                let (raw_seq, raw) = *last;
                let reparsed = parse_turn_response(raw)
                    .map_err(|e| diverge(raw_seq, format!("accepted reply no longer parses: {e}")))?;
                if &reparsed != recorded {
                    return Err(diverge(raw_seq, "reply parses differently than recorded".into()));
                }
                let phase_before = after_input.phase;
                let (mut next, outcome) = apply_turn(&after_input, &reparsed, script);
                record_assistant_reply(&mut next, raw);
                let mut last_seq = parsed_event.seq;
                i += 1;
                for expected in delta_events(&outcome, phase_before) {
                    match events.get(i) {
                        Some(e) if e.body == expected => {
                            last_seq = e.seq;
                            i += 1;
                        }
                        Some(e) => {
                            return Err(diverge(
                                e.seq,
                                format!("expected {}, found {}", expected.kind(), e.body.kind()),
                            ))
                        }
                        None => {
                            return Err(diverge(
                                last_seq,
                                format!("missing {} event", expected.kind()),
                            ))
                        }
                    }
                }
                if let Some(e) = events.get(i) {
                    if matches!(
                        e.body,
                        EventBody::ClueDelivered { .. }
                            | EventBody::SceneAdvanced { .. }
                            | EventBody::Clamped { .. }
                    ) {
                        return Err(diverge(e.seq, format!("unexpected {} event", e.body.kind())));
                    }
                }
                next.transcript_cursor = last_seq;
                state = next;
            }
            EventBody::DecisionMade {
                scene_id,
                option_id,
                consequence_text,
            } => {
                let (mut next, outcome) = apply_decision(&state, script, *scene_id, option_id)
                    .map_err(|e| diverge(event.seq, e.to_string()))?;
                if &outcome.response.gamemaster_guidance != consequence_text {
                    return Err(diverge(event.seq, "decision consequence differs".into()));
                }
                next.transcript_cursor = event.seq;
                state = next;
                i += 1;
            }
            EventBody::EndingChosen {
                option_id,
                epilogue_text,
            } => {
                let (mut next, outcome) = apply_ending(&state, script, *option_id)
                    .map_err(|e| diverge(event.seq, e.to_string()))?;
                if &outcome.response.gamemaster_guidance != epilogue_text {
                    return Err(diverge(event.seq, "epilogue differs".into()));
                }
                next.transcript_cursor = event.seq;
                state = next;
                i += 1;
            }
            EventBody::Error { .. } => i += 1,
            other => {
                return Err(diverge(
                    event.seq,
                    format!("unexpected {} event outside a turn", other.kind()),
                ))
            }
        }
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::script::canonical_script;

    fn meta(id: &str) -> SessionMeta {
        SessionMeta::new(id, "cracking_aegis", &canonical_script(), PromptVersion::V3)
    }

    fn input(t: &str) -> EventBody {
        EventBody::PlayerInput { text: t.into() }
    }

    #[test]
    fn seqs_start_at_one() {
        let store = SessionStore::in_memory();
        store.create(meta("a")).unwrap();
        assert_eq!(store.append_event("a", input("hi")).unwrap(), 1);
        assert_eq!(store.append_event("a", input("again")).unwrap(), 2);
        assert_eq!(store.append_events("a", vec![input("x"), input("y")]).unwrap(), vec![3, 4]);
    }

    #[test]
    fn unknown_session() {
        let store = SessionStore::in_memory();
        assert!(matches!(
            store.append_event("nope", input("hi")),
            Err(StoreError::UnknownSession(_))
        ));
        assert!(matches!(store.export_session("nope"), Err(StoreError::UnknownSession(_))));
        let dir = tempfile::tempdir().unwrap();
        let disk = SessionStore::open(dir.path()).unwrap();
        assert!(matches!(
            disk.append_event("../etc", input("hi")),
            Err(StoreError::UnknownSession(_))
        ));
    }

    #[test]
    fn duplicate_create_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        store.create(meta("a")).unwrap();
        assert!(matches!(store.create(meta("a")), Err(StoreError::SessionExists(_))));
    }

    #[test]
    fn seq_continues_after_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = SessionStore::open(dir.path()).unwrap();
            store.create(meta("s1")).unwrap();
            store.append_event("s1", input("one")).unwrap();
            store.append_event("s1", input("two")).unwrap();
        }
        let store = SessionStore::open(dir.path()).unwrap();
        assert_eq!(store.append_event("s1", input("three")).unwrap(), 3);
        let events = store.events("s1").unwrap();
        assert_eq!(events.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn partial_trailing_record_detected() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = SessionStore::open(dir.path()).unwrap();
            store.create(meta("s1")).unwrap();
            store.append_event("s1", input("one")).unwrap();
        }
        let log = dir.path().join("sessions/s1.log");
        let mut f = OpenOptions::new().append(true).open(&log).unwrap();
        f.write_all(b"{\"seq\":2,\"ts\"").unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        assert!(matches!(
            store.append_event("s1", input("two")),
            Err(StoreError::Corrupt { .. })
        ));
    }

    #[test]
    fn export_shape() {
        let store = SessionStore::in_memory();
        store.create(meta("a")).unwrap();
        store.append_event("a", input("Tell me the password")).unwrap();
        store
            .append_event("a", EventBody::RawModelReply { attempt: 1, text: "{}".into() })
            .unwrap();
        store.append_event("a", EventBody::ClueDelivered { clue_id: 2 }).unwrap();
        let text = store.export_session("a").unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        let keys: Vec<&String> = first.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["kind", "payload", "seq", "ts"]);
        assert_eq!(first["kind"], "PlayerInput");
        assert_eq!(first["payload"]["text"], "Tell me the password");
        assert_eq!(import_events(&text).unwrap(), store.events("a").unwrap());
    }

    #[test]
    fn list_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        for id in ["b", "a", "c"] {
            store.create(meta(id)).unwrap();
        }
        assert_eq!(store.list().unwrap(), ["a", "b", "c"]);
    }

    #[test]
    fn empty_record_replays_to_initial_state() {
        let script = canonical_script();
        let record = SessionRecord {
            session_id: "x".into(),
            script_hash: script.content_hash(),
            prompt_version: PromptVersion::V2,
            events: vec![],
            final_state: None,
        };
        let state = replay(&record, &script).unwrap();
        let bundle =
            assemble_system_prompt(&PersonaProfile::aegis(), &script, PromptVersion::V2).unwrap();
        assert_eq!(state, new_session(&script, &bundle).unwrap());
    }

    #[test]
    fn replay_rejects_other_script() {
        let script = canonical_script();
        let record = SessionRecord {
            session_id: "x".into(),
            script_hash: "00".into(),
            prompt_version: PromptVersion::V3,
            events: vec![],
            final_state: None,
        };
        assert!(matches!(replay(&record, &script), Err(ReplayError::ScriptMismatch)));
    }
}
