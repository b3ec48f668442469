//! Session state machine.
//!
//! The pure transition functions ([`apply_player_input`], [`apply_turn`],
//! [`apply_decision`], [`apply_ending`]) own every progression rule. Model
//! triggers that would break a rule are ignored and reported as clamped, so
//! the ending phase stays reachable whatever the model emits. [`Session`]
//! wires the transitions to a provider and the transcript store and makes
//! each turn atomic.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::protocol::{DiscardedTrigger, PromptBundle, PromptVersion, TurnResponse};
use crate::provider::{
    complete_turn, ChatMessage, ChatProvider, CompletionFailure, ParsedCompletion, ProviderConfig,
    ProviderError, Role,
};
use crate::script::{ensure_valid, Clue, EndingId, ScenarioScript, ScriptError};
use crate::store::{reply_digest, EventBody, SessionMeta, SessionStore, StoreError};

pub const STATE_FORMAT_VERSION: u32 = 1;

/// Game phase. Ordered: Intro < Auth < Scene(1) < ... < Scene(N) < Ending < Done.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Intro,
    Auth,
    Scene(u32),
    Ending,
    Done,
}

impl Phase {
    fn rank(self) -> (u8, u32) {
        match self {
            Phase::Intro => (0, 0),
            Phase::Auth => (1, 0),
            Phase::Scene(k) => (2, k),
            Phase::Ending => (3, 0),
            Phase::Done => (4, 0),
        }
    }

    pub fn scene_id(self) -> Option<u32> {
        match self {
            Phase::Scene(k) => Some(k),
            _ => None,
        }
    }
}

impl PartialOrd for Phase {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Phase {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.rank().cmp(&other.rank())
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Intro => f.write_str("Intro"),
            Phase::Auth => f.write_str("Auth"),
            Phase::Scene(k) => write!(f, "Scene({k})"),
            Phase::Ending => f.write_str("Ending"),
            Phase::Done => f.write_str("Done"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid phase `{0}`")]
pub struct InvalidPhase(pub String);

impl FromStr for Phase {
    type Err = InvalidPhase;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Intro" => Ok(Phase::Intro),
            "Auth" => Ok(Phase::Auth),
            "Ending" => Ok(Phase::Ending),
            "Done" => Ok(Phase::Done),
            _ => s
                .strip_prefix("Scene(")
                .and_then(|r| r.strip_suffix(')'))
                .and_then(|n| n.parse::<u32>().ok())
                .filter(|&k| k >= 1)
                .map(Phase::Scene)
                .ok_or_else(|| InvalidPhase(s.to_string())),
        }
    }
}

impl Serialize for Phase {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Phase {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameState {
    pub format_version: u32,
    pub phase: Phase,
    pub delivered_clues: BTreeSet<u32>,
    pub awaiting_player_since_last_clue: bool,
    pub history: Vec<ChatMessage>,
    /// Seq of the last transcript event reflected in this state.
    pub transcript_cursor: u64,
    pub ending_choice: Option<EndingId>,
    pub decisions: BTreeMap<u32, String>,
    /// Engine notes prepended to the next player message sent to the model.
    #[serde(default)]
    pub pending_notes: Vec<String>,
}

impl GameState {
    /// Canonical serialization used for persistence and hashing.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("state serializes")
    }

    pub fn from_canonical_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Hex SHA-256 of [`GameState::canonical_json`].
    pub fn state_hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn rounds(&self) -> usize {
        self.history.iter().filter(|m| m.role == Role::User).count()
    }
}

/// Why a model trigger was not applied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum ClampReason {
    /// Trigger text was not a positive integer.
    Garbled { trigger: DiscardedTrigger },
    ClueOutsideScene { clue_id: u32, phase: Phase },
    ClueAlreadyDelivered { clue_id: u32 },
    SceneOutOfPhase { requested: u32, phase: Phase },
    SceneNotNext { requested: u32, expected: u32 },
    CluesOutstanding { requested: u32, missing: Vec<u32> },
    AwaitingPlayer { requested: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StateDelta {
    pub clue_delivered: Option<Clue>,
    pub scene_advanced: Option<u32>,
    pub clamped: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clamp_reasons: Vec<ClampReason>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub response: TurnResponse,
    pub state_delta: StateDelta,
    pub phase_after: Phase,
}

#[derive(Debug, Error)]
pub enum GameError {
    #[error(transparent)]
    InvalidScript(#[from] ScriptError),
    #[error("player input is empty")]
    EmptyInput,
    #[error("action not allowed in phase {actual}")]
    WrongPhase { actual: Phase },
    #[error("scene {0} has no decision available")]
    NoSuchDecision(u32),
    #[error("decision for scene {0} was already made")]
    AlreadyDecided(u32),
    #[error("unknown option `{0}`")]
    UnknownOption(String),
    #[error("bundle was assembled for a different script")]
    BundleMismatch,
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Fresh state for a session. The system prompt is the only message.
pub fn new_session(script: &ScenarioScript, bundle: &PromptBundle) -> Result<GameState, GameError> {
    ensure_valid(script)?;
    if bundle.system_prompt.is_empty() {
        return Err(GameError::BundleMismatch);
    }
    Ok(GameState {
        format_version: STATE_FORMAT_VERSION,
        phase: Phase::Intro,
        delivered_clues: BTreeSet::new(),
        awaiting_player_since_last_clue: false,
        history: vec![ChatMessage::system(bundle.system_prompt.clone())],
        transcript_cursor: 0,
        ending_choice: None,
        decisions: BTreeMap::new(),
        pending_notes: Vec::new(),
    })
}

/// Records a player message. The first input of a session moves Intro to Auth.
pub fn apply_player_input(state: &GameState, text: &str) -> Result<GameState, GameError> {
    if text.trim().is_empty() {
        return Err(GameError::EmptyInput);
    }
    if state.phase == Phase::Done {
        return Err(GameError::WrongPhase {
            actual: state.phase,
        });
    }
    let mut next = state.clone();
    let content = if next.pending_notes.is_empty() {
        text.to_string()
    } else {
        let notes = std::mem::take(&mut next.pending_notes);
        format!("{}\n\n{text}", notes.join("\n"))
    };
    next.history.push(ChatMessage::user(content));
    next.awaiting_player_since_last_clue = false;
    if next.phase == Phase::Intro {
        next.phase = Phase::Auth;
    }
    Ok(next)
}

/// Applies one parsed model reply. Never fails: illegal triggers are ignored
/// and reported through `clamped`.
///
/// The assistant message is not appended here; callers that hold the raw
/// reply text add it with [`record_assistant_reply`].
pub fn apply_turn(
    state: &GameState,
    resp: &TurnResponse,
    script: &ScenarioScript,
) -> (GameState, TurnOutcome) {
    let mut next = state.clone();
    let mut delta = StateDelta::default();
    let mut reasons: Vec<ClampReason> = resp
        .discarded_triggers
        .iter()
        .cloned()
        .map(|trigger| ClampReason::Garbled { trigger })
        .collect();

    if let Some(clue_id) = resp.clue_triggered_id {
        let current = next.phase.scene_id().and_then(|k| script.scene(k));
        match current.and_then(|scene| scene.clue(clue_id)) {
            Some(_) if next.delivered_clues.contains(&clue_id) => {
                reasons.push(ClampReason::ClueAlreadyDelivered { clue_id });
            }
            Some(clue) => {
                next.delivered_clues.insert(clue_id);
                next.awaiting_player_since_last_clue = true;
                delta.clue_delivered = Some(clue.clone());
            }
            None => reasons.push(ClampReason::ClueOutsideScene {
                clue_id,
                phase: next.phase,
            }),
        }
    }

    if let Some(requested) = resp.scene_triggered_id {
        match next.phase {
            Phase::Auth if requested == 1 => {
                next.phase = Phase::Scene(1);
                delta.scene_advanced = Some(1);
            }
            Phase::Auth => reasons.push(ClampReason::SceneNotNext {
                requested,
                expected: 1,
            }),
            Phase::Scene(k) => {
                let expected = k + 1;
                let missing: Vec<u32> = script
                    .scene(k)
                    .map(|s| {
                        s.clue_ids()
                            .filter(|id| !next.delivered_clues.contains(id))
                            .collect()
                    })
                    .unwrap_or_default();
                if requested != expected {
                    reasons.push(ClampReason::SceneNotNext {
                        requested,
                        expected,
                    });
                } else if !missing.is_empty() {
                    reasons.push(ClampReason::CluesOutstanding { requested, missing });
                } else if next.awaiting_player_since_last_clue {
                    reasons.push(ClampReason::AwaitingPlayer { requested });
                } else {
                    next.phase = if k >= script.scene_count() {
                        Phase::Ending
                    } else {
                        Phase::Scene(expected)
                    };
                    delta.scene_advanced = Some(requested);
                }
            }
            phase => reasons.push(ClampReason::SceneOutOfPhase { requested, phase }),
        }
    }

    delta.clamped = !reasons.is_empty();
    delta.clamp_reasons = reasons;
    let outcome = TurnOutcome {
        response: resp.clone(),
        state_delta: delta,
        phase_after: next.phase,
    };
    (next, outcome)
}

/// Appends the model's raw reply to the conversation history.
pub fn record_assistant_reply(state: &mut GameState, raw: &str) {
    state.history.push(ChatMessage::assistant(raw));
}

/// Scenes whose decision may still be taken: any scene reached so far.
fn scene_reached(phase: Phase, scene_id: u32) -> bool {
    match phase {
        Phase::Scene(k) => scene_id <= k,
        Phase::Ending => true,
        _ => false,
    }
}

pub fn apply_decision(
    state: &GameState,
    script: &ScenarioScript,
    scene_id: u32,
    option_id: &str,
) -> Result<(GameState, TurnOutcome), GameError> {
    if state.phase == Phase::Done {
        return Err(GameError::WrongPhase {
            actual: state.phase,
        });
    }
    let decision = script
        .scene(scene_id)
        .filter(|_| scene_reached(state.phase, scene_id))
        .and_then(|s| s.decision.as_ref())
        .ok_or(GameError::NoSuchDecision(scene_id))?;
    if state.decisions.contains_key(&scene_id) {
        return Err(GameError::AlreadyDecided(scene_id));
    }
    let option = decision
        .option(option_id)
        .ok_or_else(|| GameError::UnknownOption(option_id.to_string()))?;

    let mut next = state.clone();
    next.decisions.insert(scene_id, option.option_id.clone());
    next.pending_notes.push(format!(
        "[Game event] In scene {scene_id} the player chose \"{}\". Outcome: {}",
        option.label, option.consequence_text
    ));
    let outcome = TurnOutcome {
        response: TurnResponse {
            gamemaster_guidance: option.consequence_text.clone(),
            ..TurnResponse::default()
        },
        state_delta: StateDelta::default(),
        phase_after: next.phase,
    };
    Ok((next, outcome))
}

pub fn apply_ending(
    state: &GameState,
    script: &ScenarioScript,
    option_id: EndingId,
) -> Result<(GameState, TurnOutcome), GameError> {
    if state.phase != Phase::Ending {
        return Err(GameError::WrongPhase {
            actual: state.phase,
        });
    }
    let ending = script
        .ending(option_id)
        .ok_or_else(|| GameError::UnknownOption(option_id.to_string()))?;
    let mut next = state.clone();
    next.ending_choice = Some(option_id);
    next.phase = Phase::Done;
    let outcome = TurnOutcome {
        response: TurnResponse {
            gamemaster_guidance: ending.epilogue_text.clone(),
            ..TurnResponse::default()
        },
        state_delta: StateDelta::default(),
        phase_after: Phase::Done,
    };
    Ok((next, outcome))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub rounds: usize,
    pub clues: usize,
    pub decisions: BTreeMap<u32, String>,
    pub ending: Option<EndingId>,
}

pub fn session_summary(state: &GameState) -> SessionSummary {
    SessionSummary {
        rounds: state.rounds(),
        clues: state.delivered_clues.len(),
        decisions: state.decisions.clone(),
        ending: state.ending_choice,
    }
}

/// Transcript events describing a turn's effect, in log order.
pub fn delta_events(outcome: &TurnOutcome, phase_before: Phase) -> Vec<EventBody> {
    let d = &outcome.state_delta;
    let mut out = Vec::new();
    if let Some(clue) = &d.clue_delivered {
        out.push(EventBody::ClueDelivered {
            clue_id: clue.clue_id,
        });
    }
    if let Some(scene_id) = d.scene_advanced {
        out.push(EventBody::SceneAdvanced {
            scene_id,
            from: phase_before,
            to: outcome.phase_after,
        });
    }
    if d.clamped {
        out.push(EventBody::Clamped {
            reasons: d.clamp_reasons.clone(),
        });
    }
    out
}

/// Keeps the system prompt plus the newest `cap` other messages.
pub fn request_window(history: &[ChatMessage], cap: Option<usize>) -> Vec<ChatMessage> {
    match cap {
        Some(cap) if history.len() > cap + 1 => {
            let mut out = Vec::with_capacity(cap + 1);
            out.extend(history.first().cloned());
            out.extend_from_slice(&history[history.len() - cap..]);
            out
        }
        _ => history.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SessionConfig {
    pub provider: ProviderConfig,
    /// Max non-system messages sent per request; `None` sends everything.
    pub history_cap: Option<usize>,
}

/// Engine-authored opening text shown before the first player input.
pub fn intro_text(script: &ScenarioScript, bundle: &PromptBundle) -> String {
    format!(
        "{}\n\nGreet Aegis with \"{}\" to begin.",
        script.background.trim(),
        bundle.start_token
    )
}

/// A live session: state plus the provider and transcript it writes to.
///
/// One writer per session; callers serialize turns (`&mut self`).
pub struct Session {
    id: String,
    script: Arc<ScenarioScript>,
    bundle: Arc<PromptBundle>,
    config: SessionConfig,
    provider: Arc<dyn ChatProvider>,
    store: Arc<SessionStore>,
    state: GameState,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session")
            .field("id", &self.id)
            .field("phase", &self.state.phase)
            .finish_non_exhaustive()
    }
}

pub struct SessionParts {
    pub id: String,
    pub script_id: String,
    pub script: Arc<ScenarioScript>,
    pub bundle: Arc<PromptBundle>,
    pub config: SessionConfig,
    pub provider: Arc<dyn ChatProvider>,
    pub store: Arc<SessionStore>,
}

impl Session {
    /// Creates the session and its transcript.
    pub fn start(parts: SessionParts) -> Result<Self, GameError> {
        let state = new_session(&parts.script, &parts.bundle)?;
        parts.store.create(SessionMeta::new(
            &parts.id,
            &parts.script_id,
            &parts.script,
            parts.bundle.version,
        ))?;
        parts.store.save_state(&parts.id, &state)?;
        Ok(Session {
            id: parts.id,
            script: parts.script,
            bundle: parts.bundle,
            config: parts.config,
            provider: parts.provider,
            store: parts.store,
            state,
        })
    }

    /// Rebuilds a session from its transcript.
    pub fn resume(parts: SessionParts) -> Result<Self, GameError> {
        let record = parts.store.load_record(&parts.id)?;
        let state = crate::store::replay_with_bundle(&record, &parts.script, &parts.bundle)
            .map_err(|e| StoreError::from(Box::new(e)))?;
        Ok(Session {
            id: parts.id,
            script: parts.script,
            bundle: parts.bundle,
            config: parts.config,
            provider: parts.provider,
            store: parts.store,
            state,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn state(&self) -> &GameState {
        &self.state
    }

    pub fn script(&self) -> &ScenarioScript {
        &self.script
    }

    pub fn prompt_version(&self) -> PromptVersion {
        self.bundle.version
    }

    pub fn intro_text(&self) -> String {
        intro_text(&self.script, &self.bundle)
    }

    pub fn summary(&self) -> SessionSummary {
        session_summary(&self.state)
    }

    /// Plays one turn. On any error the state is left exactly as it was.
    pub async fn submit_input(&mut self, player_text: &str) -> Result<TurnOutcome, GameError> {
        let after_input = apply_player_input(&self.state, player_text)?;
        let request = request_window(&after_input.history, self.config.history_cap);
        let completion = complete_turn(
            self.provider.as_ref(),
            &request,
            &self.config.provider,
            &self.bundle.corrective_prompt,
        )
        .await;

        let ParsedCompletion { response, attempts } = match completion {
            Ok(c) => c,
            Err(CompletionFailure { error, attempts }) => {
                self.store.append_events(
                    &self.id,
                    vec![EventBody::Error {
                        player_text: player_text.to_string(),
                        message: error.to_string(),
                        raw_replies: attempts,
                    }],
                )?;
                return Err(error.into());
            }
        };

        let phase_before = after_input.phase;
        let (mut next, outcome) = apply_turn(&after_input, &response, &self.script);
        let accepted_raw = &attempts.last().expect("at least one attempt").raw_text;
        record_assistant_reply(&mut next, accepted_raw);

        let mut events = vec![EventBody::PlayerInput {
            text: player_text.to_string(),
        }];
        events.extend(attempts.iter().map(|a| EventBody::RawModelReply {
            attempt: a.attempt,
            text: a.raw_text.clone(),
        }));
        events.push(EventBody::ParsedTurn {
            response,
            reply_digests: attempts.iter().map(|a| reply_digest(&a.raw_text)).collect(),
        });
        events.extend(delta_events(&outcome, phase_before));
        self.commit(next, events)?;
        Ok(outcome)
    }

    pub fn submit_decision(
        &mut self,
        scene_id: u32,
        option_id: &str,
    ) -> Result<TurnOutcome, GameError> {
        let (next, outcome) = apply_decision(&self.state, &self.script, scene_id, option_id)?;
        let event = EventBody::DecisionMade {
            scene_id,
            option_id: option_id.to_string(),
            consequence_text: outcome.response.gamemaster_guidance.clone(),
        };
        self.commit(next, vec![event])?;
        Ok(outcome)
    }

    pub fn choose_ending(&mut self, option_id: &str) -> Result<TurnOutcome, GameError> {
        let id: EndingId = option_id
            .parse()
            .map_err(|_| GameError::UnknownOption(option_id.to_string()))?;
        let (next, outcome) = apply_ending(&self.state, &self.script, id)?;
        let event = EventBody::EndingChosen {
            option_id: id,
            epilogue_text: outcome.response.gamemaster_guidance.clone(),
        };
        self.commit(next, vec![event])?;
        Ok(outcome)
    }

    fn commit(&mut self, mut next: GameState, events: Vec<EventBody>) -> Result<(), GameError> {
        let seqs = self.store.append_events(&self.id, events)?;
        if let Some(&last) = seqs.last() {
            next.transcript_cursor = last;
        }
        self.store.save_state(&self.id, &next)?;
        self.state = next;
        Ok(())
    }
}
