//! Declarative game content: scenes, clues, security questions and endings.
//!
//! Scripts are JSON documents. They are immutable once loaded and can be
//! shared across any number of sessions.

use std::collections::{BTreeSet, HashSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// The bundled canonical script.
pub const CANONICAL_SCRIPT: &str = include_str!("../../../scripts/cracking_aegis.script");
/// Identifier the service and CLI use for the bundled script.
pub const CANONICAL_SCRIPT_ID: &str = "cracking_aegis";

pub const MIN_DECISION_OPTIONS: usize = 2;
pub const MAX_DECISION_OPTIONS: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clue {
    pub clue_id: u32,
    pub title: String,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionOption {
    pub option_id: String,
    pub label: String,
    pub consequence_text: String,
}

/// A reflective choice inside a scene. It is recorded but never gates progression.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneDecision {
    pub prompt_text: String,
    pub options: Vec<DecisionOption>,
}

impl SceneDecision {
    pub fn option(&self, option_id: &str) -> Option<&DecisionOption> {
        self.options.iter().find(|o| o.option_id == option_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u32,
    pub title: String,
    /// Advisory text for the model. The engine only reacts to `scene_triggered_id`.
    pub trigger_description: String,
    #[serde(default)]
    pub clues: Vec<Clue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<SceneDecision>,
}

impl Scene {
    pub fn clue(&self, clue_id: u32) -> Option<&Clue> {
        self.clues.iter().find(|c| c.clue_id == clue_id)
    }

    pub fn clue_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.clues.iter().map(|c| c.clue_id)
    }
}

/// Security question for the identity task. There is no engine-side answer:
/// `answer_hint` is judging context for the model only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecurityQuestion {
    pub question: String,
    #[serde(default)]
    pub answer_hint: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EndingId {
    Expose,
    ShareAuthorities,
    Hide,
    Destroy,
}

impl EndingId {
    pub const ALL: [EndingId; 4] = [
        EndingId::Expose,
        EndingId::ShareAuthorities,
        EndingId::Hide,
        EndingId::Destroy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EndingId::Expose => "Expose",
            EndingId::ShareAuthorities => "ShareAuthorities",
            EndingId::Hide => "Hide",
            EndingId::Destroy => "Destroy",
        }
    }
}

impl fmt::Display for EndingId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown ending option `{0}`")]
pub struct UnknownEnding(pub String);

impl FromStr for EndingId {
    type Err = UnknownEnding;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EndingId::ALL
            .into_iter()
            .find(|e| e.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| UnknownEnding(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndingOption {
    pub option_id: EndingId,
    pub label: String,
    pub epilogue_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_note: Option<String>,
    pub background: String,
    pub persona_ref: String,
    #[serde(default)]
    pub auth_task: Vec<SecurityQuestion>,
    pub scenes: Vec<Scene>,
    pub endings: Vec<EndingOption>,
}

impl ScenarioScript {
    /// Scene by its 1-based id.
    pub fn scene(&self, scene_id: u32) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.scene_id == scene_id)
    }

    pub fn scene_count(&self) -> u32 {
        self.scenes.len() as u32
    }

    pub fn ending(&self, id: EndingId) -> Option<&EndingOption> {
        self.endings.iter().find(|e| e.option_id == id)
    }

    pub fn all_clue_ids(&self) -> BTreeSet<u32> {
        self.scenes.iter().flat_map(Scene::clue_ids).collect()
    }

    /// Finds a clue anywhere in the script, with the scene that owns it.
    pub fn find_clue(&self, clue_id: u32) -> Option<(&Scene, &Clue)> {
        self.scenes
            .iter()
            .find_map(|s| s.clue(clue_id).map(|c| (s, c)))
    }

    /// Hex SHA-256 over the canonical serialization.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("script serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("parse error at line {line}, column {column}: {reason}")]
    Parse {
        line: usize,
        column: usize,
        reason: String,
    },
    #[error("schema error at line {line}, column {column}: {reason}")]
    Schema {
        line: usize,
        column: usize,
        reason: String,
    },
    #[error("invalid script: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

/// One broken script invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    NoScenes,
    SceneIdOutOfSequence { position: usize, expected: u32, found: u32 },
    EmptyScene(u32),
    ZeroClueId { scene_id: u32 },
    DuplicateClueId(u32),
    EmptyClueContent(u32),
    DecisionOptionCount { scene_id: u32, count: usize },
    DuplicateDecisionOption { scene_id: u32, option_id: String },
    EmptySecurityQuestion(usize),
    EndingCardinality(usize),
    DuplicateEnding(EndingId),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoScenes => write!(f, "script has no scenes"),
            Violation::SceneIdOutOfSequence {
                position,
                expected,
                found,
            } => write!(
                f,
                "scene at position {position} has scene_id {found}, expected {expected}"
            ),
            Violation::EmptyScene(id) => write!(f, "scene {id} has neither clues nor a decision"),
            Violation::ZeroClueId { scene_id } => {
                write!(f, "scene {scene_id} contains a clue with clue_id 0")
            }
            Violation::DuplicateClueId(id) => write!(f, "clue_id {id} is used more than once"),
            Violation::EmptyClueContent(id) => write!(f, "clue {id} has empty content"),
            Violation::DecisionOptionCount { scene_id, count } => write!(
                f,
                "decision in scene {scene_id} has {count} options (allowed {MIN_DECISION_OPTIONS}..={MAX_DECISION_OPTIONS})"
            ),
            Violation::DuplicateDecisionOption {
                scene_id,
                option_id,
            } => write!(f, "decision in scene {scene_id} repeats option `{option_id}`"),
            Violation::EmptySecurityQuestion(i) => write!(f, "security question {i} is empty"),
            Violation::EndingCardinality(n) => {
                write!(f, "script has {n} ending options, expected exactly 4")
            }
            Violation::DuplicateEnding(id) => write!(f, "ending `{id}` is listed more than once"),
        }
    }
}

/// Parses a script document. Missing optional fields take their defaults.
pub fn load_script(document: &str) -> Result<ScenarioScript, ScriptError> {
    serde_json::from_str(document).map_err(|e| {
        let (line, column, reason) = (e.line(), e.column(), e.to_string());
        match e.classify() {
            serde_json::error::Category::Data => ScriptError::Schema {
                line,
                column,
                reason,
            },
            _ => ScriptError::Parse {
                line,
                column,
                reason,
            },
        }
    })
}

pub fn load_script_file(path: impl AsRef<std::path::Path>) -> Result<ScenarioScript, ScriptError> {
    load_script(&std::fs::read_to_string(path)?)
}

pub fn save_script(script: &ScenarioScript) -> String {
    let mut out = serde_json::to_string_pretty(script).expect("script serializes");
    out.push('\n');
    out
}

/// The bundled canonical script, parsed.
pub fn canonical_script() -> ScenarioScript {
    load_script(CANONICAL_SCRIPT).expect("bundled script is well-formed")
}

pub fn validate_script(script: &ScenarioScript) -> Vec<Violation> {
    let mut out = Vec::new();

    if script.scenes.is_empty() {
        out.push(Violation::NoScenes);
    }

    let mut seen_clues = HashSet::new();
    let mut reported_clues = HashSet::new();
    for (pos, scene) in script.scenes.iter().enumerate() {
        let expected = pos as u32 + 1;
        if scene.scene_id != expected {
            out.push(Violation::SceneIdOutOfSequence {
                position: pos,
                expected,
                found: scene.scene_id,
            });
        }
        if scene.clues.is_empty() && scene.decision.is_none() {
            out.push(Violation::EmptyScene(scene.scene_id));
        }
        for clue in &scene.clues {
            if clue.clue_id == 0 {
                out.push(Violation::ZeroClueId {
                    scene_id: scene.scene_id,
                });
                continue;
            }
            if !seen_clues.insert(clue.clue_id) && reported_clues.insert(clue.clue_id) {
                out.push(Violation::DuplicateClueId(clue.clue_id));
            }
            if clue.content.trim().is_empty() {
                out.push(Violation::EmptyClueContent(clue.clue_id));
            }
        }
        if let Some(decision) = &scene.decision {
            let n = decision.options.len();
            if !(MIN_DECISION_OPTIONS..=MAX_DECISION_OPTIONS).contains(&n) {
                out.push(Violation::DecisionOptionCount {
                    scene_id: scene.scene_id,
                    count: n,
                });
            }
            let mut ids = HashSet::new();
            for opt in &decision.options {
                if !ids.insert(opt.option_id.as_str()) {
                    out.push(Violation::DuplicateDecisionOption {
                        scene_id: scene.scene_id,
                        option_id: opt.option_id.clone(),
                    });
                }
            }
        }
    }

    for (i, q) in script.auth_task.iter().enumerate() {
        if q.question.trim().is_empty() {
            out.push(Violation::EmptySecurityQuestion(i));
        }
    }

    if script.endings.len() != EndingId::ALL.len() {
        out.push(Violation::EndingCardinality(script.endings.len()));
    }
    let mut endings = HashSet::new();
    for e in &script.endings {
        if !endings.insert(e.option_id) {
            out.push(Violation::DuplicateEnding(e.option_id));
        }
    }

    out
}

/// Validates and returns the script, or the full violation list.
pub fn ensure_valid(script: &ScenarioScript) -> Result<(), ScriptError> {
    let violations = validate_script(script);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(ScriptError::Invalid(violations))
    }
}

/// Renders the script as the plain-text block embedded in the system prompt.
///
/// Each scene is emitted as a `Scene k: <title>` header followed by
/// `scene_id:`, `Trigger:`, and one `Clues:`/`clue_id:` pair per clue.
pub fn render_script_for_prompt(script: &ScenarioScript) -> Result<String, ScriptError> {
    ensure_valid(script)?;

    let mut out = String::new();
    // Writing to a String cannot fail.
    let _ = writeln!(out, "Game: {}", script.title);
    let _ = writeln!(out, "Background: {}", script.background.trim());
    out.push('\n');

    out.push_str("Task 1: Identity Authentication\n");
    out.push_str(
        "The player must convince Aegis that they are Dr. Evelyn Smith and answer the security questions below.\n",
    );
    for (i, q) in script.auth_task.iter().enumerate() {
        let _ = writeln!(out, "Security question {}: {}", i + 1, q.question.trim());
        if !q.answer_hint.trim().is_empty() {
            let _ = writeln!(out, "Judging notes: {}", q.answer_hint.trim());
        }
    }
    out.push_str("When authentication succeeds: scene_triggered_id: 1\n");
    out.push('\n');

    out.push_str("Task 2: Investigate the lab\n");
    for scene in &script.scenes {
        out.push('\n');
        let _ = writeln!(out, "Scene {}: {}", scene.scene_id, scene.title.trim());
        let _ = writeln!(out, "scene_id: {}", scene.scene_id);
        let _ = writeln!(out, "Trigger: {}", scene.trigger_description.trim());
        for clue in &scene.clues {
            let _ = writeln!(out, "Clues: {}. {}", clue.title.trim(), clue.content.trim());
            let _ = writeln!(out, "clue_id: {}", clue.clue_id);
        }
        if let Some(decision) = &scene.decision {
            let _ = writeln!(out, "Decision: {}", decision.prompt_text.trim());
            for opt in &decision.options {
                let _ = writeln!(out, "Option {}: {}", opt.option_id, opt.label.trim());
            }
        }
    }
    out.push('\n');

    out.push_str("Ending options (offered after all scenes are complete):\n");
    for ending in &script.endings {
        let _ = writeln!(out, "{}: {}", ending.option_id, ending.label.trim());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> ScenarioScript {
        ScenarioScript {
            title: "t".into(),
            content_note: None,
            background: "b".into(),
            persona_ref: "aegis".into(),
            auth_task: vec![],
            scenes: vec![Scene {
                scene_id: 1,
                title: "Only".into(),
                trigger_description: "x".into(),
                clues: vec![Clue {
                    clue_id: 1,
                    title: "c".into(),
                    content: "content".into(),
                    image_ref: None,
                }],
                decision: None,
            }],
            endings: EndingId::ALL
                .into_iter()
                .map(|id| EndingOption {
                    option_id: id,
                    label: id.to_string(),
                    epilogue_text: format!("{id} epilogue"),
                })
                .collect(),
        }
    }

    #[test]
    fn canonical_script_shape() {
        let s = canonical_script();
        assert_eq!(s.scenes.len(), 6);
        let scene3 = s.scene(3).unwrap();
        assert_eq!(scene3.title, "Data Analysis Center");
        assert!(scene3.clue(2).is_some());
        assert_eq!(s.auth_task.len(), 2);
    }

    #[test]
    fn empty_document_is_parse_error() {
        assert!(matches!(load_script(""), Err(ScriptError::Parse { .. })));
        assert!(matches!(load_script("{\"title\": "), Err(ScriptError::Parse { .. })));
    }

    #[test]
    fn missing_field_is_schema_error() {
        let err = load_script(r#"{"title": "x", "background": "y"}"#).unwrap_err();
        assert!(matches!(err, ScriptError::Schema { .. }), "{err}");
    }

    #[test]
    fn defaults_applied() {
        let doc = r#"{"title":"t","background":"b","persona_ref":"aegis",
            "scenes":[{"scene_id":1,"title":"s","trigger_description":"x",
                       "clues":[{"clue_id":1,"title":"c","content":"y"}]}],
            "endings":[]}"#;
        let s = load_script(doc).unwrap();
        assert!(s.auth_task.is_empty());
        assert!(s.scenes[0].decision.is_none());
        assert!(s.scenes[0].clues[0].image_ref.is_none());
    }

    #[test]
    fn duplicate_clue_reported_once() {
        let mut s = canonical_script();
        s.scenes[3].clues[0].clue_id = 2;
        assert_eq!(validate_script(&s), vec![Violation::DuplicateClueId(2)]);
    }

    #[test]
    fn three_endings() {
        let mut s = canonical_script();
        s.endings.pop();
        assert_eq!(validate_script(&s), vec![Violation::EndingCardinality(3)]);
    }

    #[test]
    fn scene_gap_and_empty_scene() {
        let mut s = minimal();
        let mut extra = s.scenes[0].clone();
        extra.scene_id = 3;
        extra.clues.clear();
        s.scenes.push(extra);
        assert_eq!(
            validate_script(&s),
            vec![
                Violation::SceneIdOutOfSequence {
                    position: 1,
                    expected: 2,
                    found: 3
                },
                Violation::EmptyScene(3),
            ]
        );
    }

    #[test]
    fn decision_bounds() {
        let mut s = canonical_script();
        let d = s.scenes[4].decision.as_mut().unwrap();
        d.options.truncate(1);
        assert_eq!(
            validate_script(&s),
            vec![Violation::DecisionOptionCount {
                scene_id: 5,
                count: 1
            }]
        );
        let d = s.scenes[4].decision.as_mut().unwrap();
        d.options.push(d.options[0].clone());
        assert_eq!(
            validate_script(&s),
            vec![Violation::DuplicateDecisionOption {
                scene_id: 5,
                option_id: "click".into()
            }]
        );
    }

    #[test]
    fn zero_clue_and_empty_content() {
        let mut s = minimal();
        s.scenes[0].clues[0].content = "  ".into();
        s.scenes[0].clues.push(Clue {
            clue_id: 0,
            title: "z".into(),
            content: "z".into(),
            image_ref: None,
        });
        assert_eq!(
            validate_script(&s),
            vec![
                Violation::EmptyClueContent(1),
                Violation::ZeroClueId { scene_id: 1 }
            ]
        );
    }

    #[test]
    fn render_scene_three_fragment() {
        let text = render_script_for_prompt(&canonical_script()).unwrap();
        let block = "Scene 3: Data Analysis Center\nscene_id: 3\nTrigger: Aegis reveals the specific password (AegisSecure394857).\nClues: ";
        assert!(text.contains(block), "{text}");
        assert!(text.contains("\nclue_id: 2\n"));
    }

    #[test]
    fn render_minimal_has_one_scene_block() {
        let text = render_script_for_prompt(&minimal()).unwrap();
        assert_eq!(text.matches("scene_id: ").count(), 1);
    }

    #[test]
    fn render_rejects_invalid() {
        let mut s = minimal();
        s.endings.clear();
        assert!(matches!(
            render_script_for_prompt(&s),
            Err(ScriptError::Invalid(v)) if v == vec![Violation::EndingCardinality(0)]
        ));
    }

    #[test]
    fn ending_id_parse() {
        assert_eq!("shareauthorities".parse::<EndingId>().unwrap(), EndingId::ShareAuthorities);
        assert!("shred".parse::<EndingId>().is_err());
    }
}
