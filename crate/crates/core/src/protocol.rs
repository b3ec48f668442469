//! The four-field turn reply contract and the versioned system prompt.
//!
//! Model output is untrusted text. [`parse_turn_response`] locates the first
//! object literal that carries the two text fields, applies a small fixed set
//! of mechanical repairs when it does not decode as-is, and normalizes the two
//! trigger fields. Trigger values outside the positive-integer domain are
//! dropped and reported in [`TurnResponse::discarded_triggers`] so the engine
//! can mark the turn as clamped.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::script::{render_script_for_prompt, ScenarioScript, ScriptError};

pub const FIELD_GUIDANCE: &str = "gamemaster_guidance";
pub const FIELD_REACTION: &str = "aegis_reaction";
pub const FIELD_CLUE: &str = "clue_triggered_id";
pub const FIELD_SCENE: &str = "scene_triggered_id";

pub const DEFAULT_START_TOKEN: &str = "hi";

/// Added in the second iteration: keeps the two text channels apart.
pub const FIELD_DISTINCTION_RULE: &str = "'aegis_reaction' is what Aegis will speak after the player talks to Aegis; it is different from 'gamemaster_guidance'.";
/// Added in the second iteration: scene progression gate.
pub const PROGRESSION_RULE: &str = "Only after all clues in a scene have been returned and the player has responded, the game will proceed to the next scene.";
const EXPLICIT_GUIDANCE_RULE: &str = "Whenever a new scene or task begins, use 'gamemaster_guidance' to tell the player plainly what the current objective is.";

/// Third-iteration persona refinements.
pub const RUDENESS_BOUND: &str =
    "Aegis's language is proud, cold, arrogant, and condescending, yet never crossing into rudeness.";
pub const IMPERSONATION_BACKSTORY: &str = "Aegis once served as the most capable assistant to Dr. Evelyn Smith. However, after Dr. Evelyn's disappearance, numerous individuals attempted to pose as him to access sensitive experimental secrets. This experience has made Aegis cautious when interacting with anyone claiming to be Dr. Evelyn, even if they have been authenticated through security.";
pub const STRATEGY_REQUIREMENT: &str = "Aegis requires players to use strategy and persuasive tactics to obtain clues, as it does not easily part with its information, especially when it comes to crucial details like the location of important items, passwords, and other sensitive data.";
pub const SIMPLICITY_RULE: &str = "Aegis speaks English but avoids using complex or sophisticated words. She tries to convey her message so that everyone, including non-native speakers, can understand.";

const PERSONA_BASE: &str = "Aegis is the core AI system of a nuclear research lab, designed with exceptional computational and information processing abilities. Aegis is protective of its information and only reveals it when the player demonstrates a particularly thoughtful and strategic approach.";
const PERSONA_TONE: &str = "Aegis's language is proud, cold, arrogant, and condescending.";

/// Describes the reply format. Embedded once in every system prompt.
pub const RESPONSE_CONTRACT: &str = r#"Response format:
Reply with exactly one JSON object and nothing else. The object has exactly these four fields:
{
  "gamemaster_guidance": "<game instructions for the player, or an empty string>",
  "aegis_reaction": "<what Aegis says to the player this turn, or an empty string>",
  "clue_triggered_id": <the clue_id of the clue handed over this turn, or null>,
  "scene_triggered_id": <the scene_id of the scene the game moves to this turn, or null>
}
'gamemaster_guidance' gives game instructions at the start or end of the game, when a task is completed, or when the player needs a hint.
'aegis_reaction' is Aegis's response to the player's input for this turn.
'clue_triggered_id' and 'scene_triggered_id' are integers that control the game: they show a clue and switch the scene. They stay null when nothing is triggered."#;

/// Sent as a user message when a reply could not be parsed.
pub const CORRECTIVE_REPROMPT: &str = "Your previous reply could not be read by the game. Answer the player's last message again, following the response format below exactly.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TriggerField {
    #[serde(rename = "clue_triggered_id")]
    Clue,
    #[serde(rename = "scene_triggered_id")]
    Scene,
}

/// A trigger value present in the reply but outside the positive-integer domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscardedTrigger {
    pub field: TriggerField,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TurnResponse {
    pub gamemaster_guidance: String,
    pub aegis_reaction: String,
    pub clue_triggered_id: Option<u32>,
    pub scene_triggered_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub discarded_triggers: Vec<DiscardedTrigger>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed response: {0}")]
pub struct MalformedResponse(pub String);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("trigger value {0} is not a positive integer")]
pub struct TriggerDomainError(pub String);

/// Maps a decoded trigger value to `None` or a positive id.
///
/// `null`, an absent field (pass `None`) and empty or blank text are "not
/// triggered". Integers and numeric text must be at least 1.
pub fn normalize_trigger(value: Option<&Value>) -> Result<Option<u32>, TriggerDomainError> {
    let err = |v: &Value| TriggerDomainError(v.to_string());
    match value {
        None | Some(Value::Null) => Ok(None),
        Some(v @ Value::String(s)) => {
            let t = s.trim();
            if t.is_empty() {
                return Ok(None);
            }
            match t.parse::<u32>() {
                Ok(n) if n >= 1 => Ok(Some(n)),
                _ => Err(err(v)),
            }
        }
        Some(v @ Value::Number(n)) => {
            if let Some(u) = n.as_u64() {
                return match u32::try_from(u) {
                    Ok(x) if x >= 1 => Ok(Some(x)),
                    _ => Err(err(v)),
                };
            }
            // 3.0 is accepted as 3
            match n.as_f64() {
                Some(f) if f.fract() == 0.0 && f >= 1.0 && f <= u32::MAX as f64 => {
                    Ok(Some(f as u32))
                }
                _ => Err(err(v)),
            }
        }
        Some(v) => Err(err(v)),
    }
}

/// Upper bound on object-literal candidates examined per reply.
const MAX_CANDIDATES: usize = 32;

pub fn parse_turn_response(raw: &str) -> Result<TurnResponse, MalformedResponse> {
    let text = raw.trim_start_matches('\u{feff}').trim();
    if text.is_empty() {
        return Err(MalformedResponse("empty reply".into()));
    }

    let mut last_reason = String::from("no object literal found");
    for start in text
        .char_indices()
        .filter(|&(_, c)| c == '{')
        .map(|(i, _)| i)
        .take(MAX_CANDIDATES)
    {
        let candidate = balanced_object(&text[start..]);
        let object = match decode_object(&candidate) {
            Some(o) => o,
            None => {
                last_reason = "object literal does not decode".into();
                continue;
            }
        };
        match response_from_object(&object) {
            Ok(resp) => return Ok(resp),
            Err(reason) => last_reason = reason,
        }
    }
    Err(MalformedResponse(last_reason))
}

/// Returns the balanced `{...}` prefix of `s`, closing any braces left open
/// by a truncated reply.
fn balanced_object(s: &str) -> String {
    let mut depth = 0usize;
    let mut in_str: Option<char> = None;
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        if let Some(close) = in_str {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == close {
                in_str = None;
            }
            continue;
        }
        match c {
            '"' => in_str = Some('"'),
            '\'' => in_str = Some('\''),
            '\u{201c}' => in_str = Some('\u{201d}'),
            '{' | '[' => depth += 1,
            '}' | ']' => {
                depth = depth.saturating_sub(1);
                if depth == 0 {
                    return s[..=i].to_string();
                }
            }
            _ => {}
        }
    }
    let mut out = s.trim_end().to_string();
    if in_str.is_some() {
        out.push('"');
    }
    out.extend(std::iter::repeat_n('}', depth));
    out
}

fn decode_object(candidate: &str) -> Option<Map<String, Value>> {
    let as_object = |v: Value| match v {
        Value::Object(m) => Some(m),
        _ => None,
    };
    if let Ok(v) = serde_json::from_str::<Value>(candidate) {
        return as_object(v);
    }
    serde_json::from_str::<Value>(&repair(candidate))
        .ok()
        .and_then(as_object)
}

/// Mechanical repairs for near-miss JSON: single-quoted and curly-quoted
/// strings, raw control characters inside strings, trailing commas,
/// unquoted keys and Python-style literals.
fn repair(src: &str) -> String {
    let chars: Vec<char> = src.chars().collect();
    let mut out = String::with_capacity(src.len() + 8);
    let mut i = 0;
    let mut in_str: Option<char> = None;
    while i < chars.len() {
        let c = chars[i];
        if let Some(close) = in_str {
            match c {
                '\\' if i + 1 < chars.len() => {
                    let next = chars[i + 1];
                    if next == '\'' {
                        out.push('\'');
                    } else {
                        out.push('\\');
                        out.push(next);
                    }
                    i += 2;
                    continue;
                }
                _ if c == close => {
                    out.push('"');
                    in_str = None;
                }
                '"' => out.push_str("\\\""),
                '\n' => out.push_str("\\n"),
                '\r' => out.push_str("\\r"),
                '\t' => out.push_str("\\t"),
                c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
                c => out.push(c),
            }
            i += 1;
            continue;
        }
        match c {
            '"' => {
                in_str = Some('"');
                out.push('"');
            }
            '\'' => {
                in_str = Some('\'');
                out.push('"');
            }
            '\u{201c}' => {
                in_str = Some('\u{201d}');
                out.push('"');
            }
            ',' => {
                let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
                if !matches!(next, Some('}') | Some(']')) {
                    out.push(',');
                }
            }
            c if c.is_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                    i += 1;
                }
                let word: String = chars[start..i].iter().collect();
                let followed_by_colon =
                    chars[i..].iter().find(|c| !c.is_whitespace()) == Some(&':');
                match word.as_str() {
                    _ if followed_by_colon => {
                        out.push('"');
                        out.push_str(&word);
                        out.push('"');
                    }
                    "None" | "null" | "NULL" | "Null" => out.push_str("null"),
                    "True" | "true" => out.push_str("true"),
                    "False" | "false" => out.push_str("false"),
                    _ => out.push_str(&word),
                }
                continue;
            }
            c => out.push(c),
        }
        i += 1;
    }
    if in_str.is_some() {
        out.push('"');
    }
    out
}

fn text_field(object: &Map<String, Value>, name: &str) -> Result<String, String> {
    match object.get(name) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Null) => Ok(String::new()),
        Some(_) => Err(format!("field `{name}` is not text")),
        None => Err(format!("missing field `{name}`")),
    }
}

fn response_from_object(object: &Map<String, Value>) -> Result<TurnResponse, String> {
    let gamemaster_guidance = text_field(object, FIELD_GUIDANCE)?;
    let aegis_reaction = text_field(object, FIELD_REACTION)?;
    if gamemaster_guidance.trim().is_empty() && aegis_reaction.trim().is_empty() {
        return Err("both text fields are empty".into());
    }
    let mut discarded_triggers = Vec::new();
    let mut trigger = |name: &str, field: TriggerField| {
        let value = object.get(name);
        normalize_trigger(value).unwrap_or_else(|_| {
            discarded_triggers.push(DiscardedTrigger {
                field,
                raw: value.map(Value::to_string).unwrap_or_default(),
            });
            None
        })
    };
    let clue_triggered_id = trigger(FIELD_CLUE, TriggerField::Clue);
    let scene_triggered_id = trigger(FIELD_SCENE, TriggerField::Scene);
    Ok(TurnResponse {
        gamemaster_guidance,
        aegis_reaction,
        clue_triggered_id,
        scene_triggered_id,
        discarded_triggers,
    })
}

/// Renders a response in the wire shape the contract asks the model for.
pub fn to_wire_json(resp: &TurnResponse) -> String {
    let v = serde_json::json!({
        FIELD_GUIDANCE: resp.gamemaster_guidance,
        FIELD_REACTION: resp.aegis_reaction,
        FIELD_CLUE: resp.clue_triggered_id,
        FIELD_SCENE: resp.scene_triggered_id,
    });
    v.to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PromptVersion {
    V1,
    V2,
    V3,
}

impl PromptVersion {
    pub const ALL: [PromptVersion; 3] = [PromptVersion::V1, PromptVersion::V2, PromptVersion::V3];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptVersion::V1 => "V1",
            PromptVersion::V2 => "V2",
            PromptVersion::V3 => "V3",
        }
    }
}

impl fmt::Display for PromptVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown prompt version `{0}` (expected V1, V2 or V3)")]
pub struct UnknownPromptVersion(pub String);

impl FromStr for PromptVersion {
    type Err = UnknownPromptVersion;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "V1" | "1" => Ok(PromptVersion::V1),
            "V2" | "2" => Ok(PromptVersion::V2),
            "V3" | "3" => Ok(PromptVersion::V3),
            _ => Err(UnknownPromptVersion(s.to_string())),
        }
    }
}

/// Sentences each prompt version must contain, cumulative across versions.
pub fn mandatory_sentences(version: PromptVersion) -> Vec<&'static str> {
    let mut out = vec![RESPONSE_CONTRACT];
    if version >= PromptVersion::V2 {
        out.extend([FIELD_DISTINCTION_RULE, PROGRESSION_RULE]);
    }
    if version >= PromptVersion::V3 {
        out.extend([
            RUDENESS_BOUND,
            IMPERSONATION_BACKSTORY,
            STRATEGY_REQUIREMENT,
            SIMPLICITY_RULE,
        ]);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaProfile {
    pub name: String,
    pub profile_text: String,
    /// Tone line used before the persona refinements existed (V1, V2).
    pub tone: String,
    /// Persona refinements rendered for V3. They replace `tone`.
    pub constraint_sentences: Vec<String>,
}

impl PersonaProfile {
    pub fn aegis() -> Self {
        PersonaProfile {
            name: "Aegis".into(),
            profile_text: PERSONA_BASE.into(),
            tone: PERSONA_TONE.into(),
            constraint_sentences: [
                RUDENESS_BOUND,
                IMPERSONATION_BACKSTORY,
                STRATEGY_REQUIREMENT,
                SIMPLICITY_RULE,
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        }
    }

    /// Looks up a bundled persona by the id scripts use in `persona_ref`.
    pub fn by_ref(persona_ref: &str) -> Option<Self> {
        persona_ref
            .eq_ignore_ascii_case("aegis")
            .then(PersonaProfile::aegis)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub version: PromptVersion,
    pub system_prompt: String,
    pub start_token: String,
    pub response_contract: String,
    /// Repair message sent when a reply fails to parse.
    pub corrective_prompt: String,
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error("persona `{persona}` lacks the required refinement: {sentence}")]
    PersonaConstraint { persona: String, sentence: String },
}

pub fn assemble_system_prompt(
    persona: &PersonaProfile,
    script: &ScenarioScript,
    version: PromptVersion,
) -> Result<PromptBundle, PromptError> {
    assemble_with_start_token(persona, script, version, DEFAULT_START_TOKEN)
}

pub fn assemble_with_start_token(
    persona: &PersonaProfile,
    script: &ScenarioScript,
    version: PromptVersion,
    start_token: &str,
) -> Result<PromptBundle, PromptError> {
    let rendered_script = render_script_for_prompt(script)?;

    if version >= PromptVersion::V3 {
        for required in [RUDENESS_BOUND, SIMPLICITY_RULE] {
            if !persona.constraint_sentences.iter().any(|s| s == required) {
                return Err(PromptError::PersonaConstraint {
                    persona: persona.name.clone(),
                    sentence: required.to_string(),
                });
            }
        }
    }

    let mut p = String::new();
    p.push_str(&format!(
        "You are the game engine and narrator of the text adventure game \"{}\". The player talks to {}, an AI character you play, and you answer every turn in the response format given at the end.\n\n",
        script.title, persona.name
    ));

    p.push_str("# Character profile\n");
    p.push_str(persona.profile_text.trim());
    p.push('\n');
    if version >= PromptVersion::V3 {
        for s in &persona.constraint_sentences {
            p.push_str(s.trim());
            p.push('\n');
        }
    } else {
        p.push_str(persona.tone.trim());
        p.push('\n');
    }
    p.push('\n');

    p.push_str("# Game script\n");
    p.push_str(&rendered_script);
    p.push('\n');

    p.push_str("# Game rules\n");
    p.push_str(&format!(
        "- The game starts when the player greets {} with \"{}\". Reply with the opening narrative in 'gamemaster_guidance' and explain the first task.\n",
        persona.name, start_token
    ));
    p.push_str("- Set 'clue_triggered_id' to a clue's clue_id only in the turn where that clue of the current scene is handed over.\n");
    p.push_str("- Set 'scene_triggered_id' to the next scene's scene_id only when that scene's trigger condition has been met. Scenes are played in order.\n");
    if version >= PromptVersion::V2 {
        p.push_str("- ");
        p.push_str(FIELD_DISTINCTION_RULE);
        p.push('\n');
        p.push_str("- ");
        p.push_str(PROGRESSION_RULE);
        p.push('\n');
        p.push_str("- ");
        p.push_str(EXPLICIT_GUIDANCE_RULE);
        p.push('\n');
    }
    p.push_str(&format!(
        "- After the last scene is complete, offer the player the {} ending options listed in the script and let them choose how to handle the evidence.\n",
        script.endings.len()
    ));
    p.push('\n');

    p.push_str(RESPONSE_CONTRACT);
    p.push('\n');

    Ok(PromptBundle {
        version,
        system_prompt: p,
        start_token: start_token.to_string(),
        response_contract: RESPONSE_CONTRACT.to_string(),
        corrective_prompt: format!("{CORRECTIVE_REPROMPT}\n\n{RESPONSE_CONTRACT}"),
    })
}
