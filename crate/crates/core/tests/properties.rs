use std::collections::BTreeSet;

use aegis_core::analysis::{export_heatmap, parse_heatmap, StrategyCode, UsageMatrix};
use aegis_core::fixtures::{conforming_reply, reply};
use aegis_core::game::{apply_player_input, apply_turn, new_session, GameState, Phase};
use aegis_core::protocol::{
    assemble_system_prompt, normalize_trigger, parse_turn_response, to_wire_json, PersonaProfile,
    PromptBundle, PromptVersion, TurnResponse,
};
use aegis_core::script::{canonical_script, load_script, save_script, ScenarioScript};
use aegis_core::store::{export_events, import_events, EventBody, TranscriptEvent};
use chrono::{TimeZone, Utc};
use proptest::prelude::*;
use serde_json::{json, Value};

fn setup() -> (ScenarioScript, PromptBundle) {
    let script = canonical_script();
    let bundle =
        assemble_system_prompt(&PersonaProfile::aegis(), &script, PromptVersion::V3).unwrap();
    (script, bundle)
}

#[derive(Debug, Clone)]
enum Mutation {
    Delete(usize, usize),
    Insert(usize, String),
    Truncate(usize),
    Replace(usize, char),
    Duplicate(usize, usize),
    Wrap(String, String),
}

fn mutation() -> impl Strategy<Value = Mutation> {
    prop_oneof![
        (any::<usize>(), 1usize..12).prop_map(|(a, n)| Mutation::Delete(a, n)),
        (any::<usize>(), "[{}\\[\\]\":,'\\\\a-z0-9 \\n]{1,6}").prop_map(|(a, s)| Mutation::Insert(a, s)),
        any::<usize>().prop_map(Mutation::Truncate),
        (any::<usize>(), any::<char>()).prop_map(|(a, c)| Mutation::Replace(a, c)),
        (any::<usize>(), 1usize..20).prop_map(|(a, n)| Mutation::Duplicate(a, n)),
        ("[a-zA-Z `]{0,10}", "[a-zA-Z `]{0,10}").prop_map(|(a, b)| Mutation::Wrap(a, b)),
    ]
}

fn boundary(s: &str, at: usize) -> usize {
    let mut i = at % (s.len() + 1);
    while !s.is_char_boundary(i) {
        i -= 1;
    }
    i
}

fn mutate(s: &str, m: &Mutation) -> String {
    let mut s = s.to_string();
    match m {
        Mutation::Delete(a, n) => {
            let a = boundary(&s, *a);
            let b = boundary(&s, (a + n).min(s.len()));
            s.replace_range(a..b.max(a), "");
        }
        Mutation::Insert(a, t) => {
            let a = boundary(&s, *a);
            s.insert_str(a, t);
        }
        Mutation::Truncate(a) => {
            let a = boundary(&s, *a);
            s.truncate(a);
        }
        Mutation::Replace(a, c) => {
            let a = boundary(&s, *a);
            if let Some(old) = s[a..].chars().next() {
                s.replace_range(a..a + old.len_utf8(), &c.to_string());
            }
        }
        Mutation::Duplicate(a, n) => {
            let a = boundary(&s, *a);
            let b = boundary(&s, (a + n).min(s.len()));
            let piece = s[a..b.max(a)].to_string();
            s.insert_str(a, &piece);
        }
        Mutation::Wrap(pre, post) => s = format!("{pre}{s}{post}"),
    }
    s
}

fn trigger_value() -> impl Strategy<Value = Value> {
    prop_oneof![
        Just(json!("")),
        Just(Value::Null),
        (1u32..10).prop_map(|n| json!(n)),
        (1u32..10).prop_map(|n| json!(n.to_string())),
        Just(json!("three")),
        Just(json!(-1)),
        Just(json!(2.5)),
        Just(json!([1])),
    ]
}

fn valid_reply() -> impl Strategy<Value = String> {
    (
        "[a-zA-Z .,!?'’]{0,40}",
        "[a-zA-Z .,!?'’]{1,40}",
        trigger_value(),
        trigger_value(),
        any::<bool>(),
    )
        .prop_map(|(g, r, c, s, pretty)| {
            let v = json!({
                "gamemaster_guidance": g,
                "aegis_reaction": r,
                "clue_triggered_id": c,
                "scene_triggered_id": s,
            });
            if pretty {
                serde_json::to_string_pretty(&v).unwrap()
            } else {
                v.to_string()
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1500))]

    #[test]
    fn mutated_replies_never_fault(raw in valid_reply(), muts in prop::collection::vec(mutation(), 1..4)) {
        let mut s = raw;
        for m in &muts {
            s = mutate(&s, m);
        }
        if let Ok(resp) = parse_turn_response(&s) {
            prop_assert!(!(resp.gamemaster_guidance.is_empty() && resp.aegis_reaction.is_empty()));
            prop_assert!(resp.clue_triggered_id.is_none_or(|c| c >= 1));
            prop_assert!(resp.scene_triggered_id.is_none_or(|c| c >= 1));
        }
    }
}

proptest! {
    #[test]
    fn valid_replies_parse(raw in valid_reply()) {
        prop_assert!(parse_turn_response(&raw).is_ok());
    }

    #[test]
    fn wire_roundtrip(g in ".{0,30}", r in ".{1,30}", c in proptest::option::of(1u32..100), s in proptest::option::of(1u32..100)) {
        let resp = TurnResponse {
            gamemaster_guidance: g,
            aegis_reaction: r,
            clue_triggered_id: c,
            scene_triggered_id: s,
            discarded_triggers: Vec::new(),
        };
        let back = parse_turn_response(&to_wire_json(&resp)).unwrap();
        prop_assert_eq!(back, resp);
    }

    #[test]
    fn normalize_positive_integers(n in 1u32..=u32::MAX) {
        prop_assert_eq!(normalize_trigger(Some(&json!(n))).unwrap(), Some(n));
        prop_assert_eq!(normalize_trigger(Some(&json!(n.to_string()))).unwrap(), Some(n));
        prop_assert_eq!(normalize_trigger(Some(&json!(format!(" {n} ")))).unwrap(), Some(n));
    }

    #[test]
    fn normalize_rejects_nonpositive(n in i64::MIN..=0) {
        prop_assert!(normalize_trigger(Some(&json!(n))).is_err());
    }

    #[test]
    fn normalize_blank_is_none(ws in "[ \t\n]{0,5}") {
        prop_assert_eq!(normalize_trigger(Some(&json!(ws))).unwrap(), None);
    }
}

fn random_trigger_reply() -> impl Strategy<Value = String> {
    let trig = prop_oneof![
        3 => Just(json!("")),
        4 => (1u32..9).prop_map(|n| json!(n.to_string())),
        1 => Just(json!("two")),
        1 => Just(json!(0)),
    ];
    (trig.clone(), trig, any::<bool>()).prop_map(|(c, s, garble)| {
        let v = json!({
            "gamemaster_guidance": "g",
            "aegis_reaction": "r",
            "clue_triggered_id": c,
            "scene_triggered_id": s,
        });
        if garble {
            format!("Sure. {}", v.to_string().replace('"', "'"))
        } else {
            v.to_string()
        }
    })
}

fn phase_rank(p: Phase) -> u32 {
    match p {
        Phase::Intro => 0,
        Phase::Auth => 1,
        Phase::Scene(k) => 1 + k,
        Phase::Ending => 100,
        Phase::Done => 101,
    }
}

fn check_transition(script: &ScenarioScript, before: &GameState, after: &GameState) -> Result<(), TestCaseError> {
    prop_assert!(before.delivered_clues.is_subset(&after.delivered_clues));
    prop_assert!(after.delivered_clues.is_subset(&script.all_clue_ids()));
    let (rb, ra) = (phase_rank(before.phase), phase_rank(after.phase));
    prop_assert!(ra >= rb);
    match (before.phase, after.phase) {
        (Phase::Scene(a), Phase::Scene(b)) => prop_assert!(b == a || b == a + 1),
        (Phase::Scene(a), Phase::Ending) => prop_assert_eq!(a, script.scene_count()),
        (Phase::Auth, Phase::Scene(b)) => prop_assert_eq!(b, 1),
        (Phase::Auth, p) => prop_assert!(p == Phase::Auth),
        (_, Phase::Done) => prop_assert!(false, "a turn never finishes the game"),
        _ => {}
    }
    if after.phase == Phase::Ending {
        prop_assert_eq!(&after.delivered_clues, &script.all_clue_ids());
    }
    // new clues belong to the scene being played
    for c in after.delivered_clues.difference(&before.delivered_clues) {
        let (scene, _) = script.find_clue(*c).unwrap();
        prop_assert_eq!(before.phase, Phase::Scene(scene.scene_id));
    }
    Ok(())
}

/// Conforming replies reach Ending from `state` within a bounded number of
/// turns.
fn reaches_ending(script: &ScenarioScript, mut state: GameState) -> bool {
    for _ in 0..64 {
        if state.phase == Phase::Ending {
            return true;
        }
        let raw = conforming_reply(&state, script);
        let s = apply_player_input(&state, "go on").unwrap();
        state = apply_turn(&s, &parse_turn_response(&raw).unwrap(), script).0;
    }
    false
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn random_triggers_keep_invariants(replies in prop::collection::vec(random_trigger_reply(), 1..60)) {
        let (script, bundle) = setup();
        let mut state = new_session(&script, &bundle).unwrap();
        for raw in &replies {
            if state.phase == Phase::Ending {
                break;
            }
            let s = apply_player_input(&state, "move").unwrap();
            prop_assert!(!s.awaiting_player_since_last_clue);
            let Ok(resp) = parse_turn_response(raw) else { continue };
            let (next, outcome) = apply_turn(&s, &resp, &script);
            // purity
            let (again, outcome2) = apply_turn(&s, &resp, &script);
            prop_assert_eq!(&again, &next);
            prop_assert_eq!(&outcome, &outcome2);
            check_transition(&script, &s, &next)?;
            let expected_clamp = !outcome.state_delta.clamp_reasons.is_empty();
            prop_assert_eq!(outcome.state_delta.clamped, expected_clamp);
            let any_rejected = (resp.clue_triggered_id.is_some() && outcome.state_delta.clue_delivered.is_none())
                || (resp.scene_triggered_id.is_some() && outcome.state_delta.scene_advanced.is_none())
                || !resp.discarded_triggers.is_empty();
            prop_assert_eq!(outcome.state_delta.clamped, any_rejected);
            state = next;
            prop_assert!(reaches_ending(&script, state.clone()));
        }
    }
}

#[test]
fn ending_reachable_from_every_reachable_state() {
    // breadth-first over (phase, delivered, awaiting) with every trigger pair
    let (script, bundle) = setup();
    let start = new_session(&script, &bundle).unwrap();
    let key = |s: &GameState| (s.phase, s.delivered_clues.clone(), s.awaiting_player_since_last_clue);
    let mut seen = BTreeSet::new();
    seen.insert(key(&start));
    let mut frontier = vec![start];
    let triggers: Vec<Option<u32>> = std::iter::once(None).chain((1..=8).map(Some)).collect();
    while let Some(state) = frontier.pop() {
        assert!(reaches_ending(&script, state.clone()), "stuck at {:?}", key(&state));
        if state.phase == Phase::Ending {
            continue;
        }
        let s = apply_player_input(&state, "x").unwrap();
        for &c in &triggers {
            for &sc in &triggers {
                let resp = parse_turn_response(&reply("g", "r", c, sc)).unwrap();
                let (mut next, _) = apply_turn(&s, &resp, &script);
                check_transition(&script, &s, &next).unwrap();
                next.history.clear();
                if seen.insert(key(&next)) {
                    frontier.push(next);
                }
            }
        }
    }
    assert!(seen.iter().any(|k| k.0 == Phase::Ending));
    assert!(seen.len() > 10);
}

proptest! {
    #[test]
    fn events_roundtrip(texts in prop::collection::vec(".{1,40}", 1..8)) {
        let events: Vec<TranscriptEvent> = texts
            .into_iter()
            .enumerate()
            .map(|(i, text)| TranscriptEvent {
                seq: i as u64 + 1,
                ts: Utc.timestamp_opt(1_700_000_000 + i as i64, 0).unwrap(),
                body: EventBody::PlayerInput { text },
            })
            .collect();
        let text = export_events(&events);
        prop_assert_eq!(text.lines().count(), events.len());
        prop_assert_eq!(import_events(&text).unwrap(), events);
    }

    #[test]
    fn heatmap_roundtrip(cells in prop::collection::vec(prop::collection::vec(0u32..50, 3), 12)) {
        let m = UsageMatrix {
            rows: StrategyCode::ALL.to_vec(),
            columns: vec!["P01".into(), "P02".into(), "P03".into()],
            cells,
        };
        prop_assert_eq!(parse_heatmap(&export_heatmap(&m)).unwrap(), m);
    }

    #[test]
    fn script_title_roundtrip(title in "[^\u{0}]{1,40}") {
        let mut script = canonical_script();
        script.title = title;
        let back = load_script(&save_script(&script)).unwrap();
        prop_assert_eq!(back.content_hash(), script.content_hash());
        prop_assert_eq!(back, script);
    }
}
