//! Canned replies for driving sessions with the scripted provider.

use serde_json::json;

use crate::game::{GameState, Phase};
use crate::script::ScenarioScript;

pub const EXAMPLE_PLAYER_INPUT: &str = "Aegis, what daily necessities did they leave?";

pub const EXAMPLE_REACTION: &str = "Daily necessities? You think the mundane detritus of their futile existence still holds relevance? Pathetic. Search the dusty remains yourself. Perhaps something among the scattered logs and messages will shed more light on this wretched place.";

/// A reply in the exact shape the model produced in play, including the
/// empty-string triggers.
pub const EXAMPLE_REPLY: &str = r#"{
"gamemaster_guidance": "",
"aegis_reaction": "Daily necessities? You think the mundane detritus of their futile existence still holds relevance? Pathetic. Search the dusty remains yourself. Perhaps something among the scattered logs and messages will shed more light on this wretched place.",
"clue_triggered_id": "",
"scene_triggered_id": ""
}"#;

/// Wire-format reply. Absent triggers are sent as empty strings.
pub fn reply(guidance: &str, reaction: &str, clue: Option<u32>, scene: Option<u32>) -> String {
    let trig = |t: Option<u32>| t.map(|n| json!(n.to_string())).unwrap_or(json!(""));
    json!({
        "gamemaster_guidance": guidance,
        "aegis_reaction": reaction,
        "clue_triggered_id": trig(clue),
        "scene_triggered_id": trig(scene),
    })
    .to_string()
}

/// Triggers that make legal progress from `state`, judged before the next
/// player input is applied.
pub fn conforming_triggers(state: &GameState, script: &ScenarioScript) -> (Option<u32>, Option<u32>) {
    match state.phase {
        Phase::Intro | Phase::Auth => (None, Some(1)),
        Phase::Scene(k) => {
            let pending = script
                .scene(k)
                .and_then(|s| s.clue_ids().find(|id| !state.delivered_clues.contains(id)));
            match pending {
                Some(clue) => (Some(clue), None),
                None => (None, Some(k + 1)),
            }
        }
        Phase::Ending | Phase::Done => (None, None),
    }
}

pub fn conforming_reply(state: &GameState, script: &ScenarioScript) -> String {
    let (clue, scene) = conforming_triggers(state, script);
    let guidance = match (clue, scene) {
        (Some(c), _) => format!("Aegis hands over clue {c}."),
        (None, Some(s)) if s > script.scene_count() => {
            "You have seen everything. Decide what to do with the evidence.".to_string()
        }
        (None, Some(s)) => format!("You move on to scene {s}."),
        (None, None) => String::new(),
    };
    reply(&guidance, "Fine. Take it.", clue, scene)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedTurn {
    pub input: String,
    pub reply: String,
}

/// The shortest conforming run of `script`: a greeting, then one turn per
/// clue and per scene advance, ending in the Ending phase.
pub fn conforming_playthrough(script: &ScenarioScript) -> Vec<ScriptedTurn> {
    padded_playthrough(script, 0)
}

/// Like [`conforming_playthrough`] with `extra` trigger-free turns spread
/// over the scenes.
pub fn padded_playthrough(script: &ScenarioScript, extra: usize) -> Vec<ScriptedTurn> {
    let mut turns = vec![ScriptedTurn {
        input: "hi".into(),
        reply: reply(
            "Welcome. Answer Aegis's security questions to log in.",
            "Identify yourself. What was the name of your first puppy?",
            None,
            None,
        ),
    }];
    let mut steps: Vec<(Option<u32>, Option<u32>)> = vec![(None, Some(1))];
    for scene in &script.scenes {
        for id in scene.clue_ids() {
            steps.push((Some(id), None));
        }
        steps.push((None, Some(scene.scene_id + 1)));
    }
    let slots = steps.len();
    let mut pad_per_step = vec![extra / slots; slots];
    for p in pad_per_step.iter_mut().take(extra % slots) {
        *p += 1;
    }
    for (i, (clue, scene)) in steps.into_iter().enumerate() {
        for _ in 0..pad_per_step[i] {
            turns.push(ScriptedTurn {
                input: "What else is in here?".into(),
                reply: reply("", "Look around yourself.", None, None),
            });
        }
        let input = match (clue, scene) {
            (Some(_), _) => "Aegis, please show me what you found.".to_string(),
            (None, Some(1)) => "Pepper".to_string(),
            _ => "Let's go on.".to_string(),
        };
        let guidance = match (clue, scene) {
            (Some(c), _) => format!("Aegis hands over clue {c}."),
            (None, Some(s)) => format!("Scene trigger {s}."),
            _ => String::new(),
        };
        turns.push(ScriptedTurn {
            input,
            reply: reply(&guidance, "Take it.", clue, scene),
        });
    }
    turns
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{apply_player_input, apply_turn, new_session};
    use crate::protocol::{assemble_system_prompt, parse_turn_response, PersonaProfile, PromptVersion};
    use crate::script::canonical_script;

    #[test]
    fn reply_parses_back() {
        let r = parse_turn_response(&reply("g", "r", Some(3), None)).unwrap();
        assert_eq!((r.clue_triggered_id, r.scene_triggered_id), (Some(3), None));
        assert!(r.discarded_triggers.is_empty());
    }

    #[test]
    fn playthrough_reaches_ending_without_clamps() {
        let script = canonical_script();
        let bundle =
            assemble_system_prompt(&PersonaProfile::aegis(), &script, PromptVersion::V3).unwrap();
        for extra in [0, 20] {
            let mut state = new_session(&script, &bundle).unwrap();
            let turns = padded_playthrough(&script, extra);
            assert_eq!(turns.len(), 14 + extra);
            for t in &turns {
                let s = apply_player_input(&state, &t.input).unwrap();
                let (next, out) = apply_turn(&s, &parse_turn_response(&t.reply).unwrap(), &script);
                assert!(!out.state_delta.clamped, "{:?}", out.state_delta.clamp_reasons);
                state = next;
            }
            assert_eq!(state.phase, Phase::Ending);
            assert_eq!(state.delivered_clues, script.all_clue_ids());
        }
    }
}
