use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use aegis_core::analysis::synthetic::{study_shaped_plan, write_corpus};
use aegis_core::analysis::{
    load_codebook_file, round_stats, usage_matrix, write_heatmap, AnalysisError, Codebook,
    StrategyCode,
};
use aegis_core::fixtures::padded_playthrough;
use aegis_core::game::{GameError, Phase, Session, SessionConfig, SessionParts, TurnOutcome};
use aegis_core::protocol::{assemble_system_prompt, PersonaProfile, PromptVersion};
use aegis_core::provider::{ProviderConfig, ProviderMode};
use aegis_core::script::{
    canonical_script, load_script_file, validate_script, ScenarioScript, ScriptError,
    CANONICAL_SCRIPT_ID,
};
use aegis_core::store::{load_record_from_log, replay, ReplayError, SessionRecord, SessionStore};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "aegis", about = "Author, play, replay and analyze Cracking Aegis sessions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a script and print every violation.
    Validate(ScriptArg),
    /// Write the assembled system prompt.
    ExportPrompt {
        #[command(flatten)]
        script: ScriptArg,
        #[arg(long = "version", alias = "prompt-version", default_value = "V3")]
        version: PromptVersion,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Play in the terminal, one line per turn.
    Play(PlayArgs),
    /// Re-run a session log and print the final state hash.
    Replay {
        log: PathBuf,
        #[command(flatten)]
        script: ScriptArg,
    },
    /// Tag player inputs and write heatmap.csv and stats.json.
    Analyze {
        /// Directory of session logs (a data dir also works).
        logs: PathBuf,
        #[arg(long)]
        codebook: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write offline fixtures.
    #[command(subcommand)]
    Fixture(FixtureCommand),
}

#[derive(Debug, Subcommand)]
enum FixtureCommand {
    /// A mock reply queue that plays the canonical script to its ending.
    Queue {
        #[arg(long)]
        out: PathBuf,
        /// Trigger-free turns added along the way.
        #[arg(long, default_value_t = 0)]
        extra: usize,
    },
    /// The 22-session synthetic corpus used to check the analyzer.
    Corpus {
        #[arg(long)]
        data_dir: PathBuf,
    },
}

#[derive(Debug, Args)]
struct ScriptArg {
    /// Script file; the bundled script when omitted.
    #[arg(long)]
    script: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PlayArgs {
    #[command(flatten)]
    script: ScriptArg,
    #[arg(long = "version", alias = "prompt-version", default_value = "V3")]
    version: PromptVersion,
    /// `live` or `mock:<queue file>`
    #[arg(long, default_value = "live")]
    provider: ProviderMode,
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    /// Defaults to the first free `play-<n>`.
    #[arg(long)]
    session_id: Option<String>,
    #[arg(long)]
    endpoint_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    temperature: Option<f32>,
    #[arg(long)]
    max_retries: Option<u8>,
    #[arg(long)]
    timeout_secs: Option<u64>,
    #[arg(long)]
    history_cap: Option<usize>,
}

/// Exit 1: the input has problems. Exit 2: the tool could not do its job.
enum Failure {
    Findings(String),
    Runtime(String),
}

fn runtime(e: impl Display) -> Failure {
    Failure::Runtime(e.to_string())
}

type CmdResult = Result<(), Failure>;

fn load_script_arg(arg: &ScriptArg) -> Result<(String, ScenarioScript), Failure> {
    match &arg.script {
        None => Ok((CANONICAL_SCRIPT_ID.to_string(), canonical_script())),
        Some(path) => {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("script")
                .to_string();
            let script = load_script_file(path).map_err(|e| match e {
                ScriptError::Io(_) => runtime(format!("{}: {e}", path.display())),
                other => Failure::Findings(format!("{}: {other}", path.display())),
            })?;
            Ok((id, script))
        }
    }
}

fn validate(arg: ScriptArg) -> CmdResult {
    let (_, script) = load_script_arg(&arg)?;
    let violations = validate_script(&script);
    if violations.is_empty() {
        let clues = script.all_clue_ids().len();
        println!(
            "ok: {} ({} scenes, {} clues, {} endings)",
            script.title,
            script.scene_count(),
            clues,
            script.endings.len()
        );
        return Ok(());
    }
    for v in &violations {
        println!("violation: {v}");
    }
    Err(Failure::Findings(format!("{} violation(s)", violations.len())))
}

fn persona_for(script: &ScenarioScript) -> Result<PersonaProfile, Failure> {
    PersonaProfile::by_ref(&script.persona_ref)
        .ok_or_else(|| Failure::Findings(format!("unknown persona `{}`", script.persona_ref)))
}

fn export_prompt(arg: ScriptArg, version: PromptVersion, out: Option<PathBuf>) -> CmdResult {
    let (_, script) = load_script_arg(&arg)?;
    let bundle = assemble_system_prompt(&persona_for(&script)?, &script, version)
        .map_err(|e| Failure::Findings(e.to_string()))?;
    match out {
        Some(path) => fs::write(&path, &bundle.system_prompt).map_err(runtime),
        None => io::stdout()
            .write_all(bundle.system_prompt.as_bytes())
            .map_err(runtime),
    }
}

fn provider_config(args: &PlayArgs) -> ProviderConfig {
    let mut c = ProviderConfig::default();
    if let Some(v) = &args.endpoint_url {
        c.endpoint_url = v.clone();
    }
    if let Some(v) = &args.model {
        c.model_name = v.clone();
    }
    if let Some(v) = &args.api_key_env {
        c.api_key_env = v.clone();
    }
    if let Some(v) = args.temperature {
        c.temperature = v;
    }
    if let Some(v) = args.max_retries {
        c.max_retries = v;
    }
    if let Some(v) = args.timeout_secs {
        c.timeout = Duration::from_secs(v);
    }
    if args.provider.is_mock() {
        c.backoff_base = Duration::ZERO;
    }
    c
}

fn free_session_id(store: &SessionStore) -> String {
    (1..)
        .map(|n| format!("play-{n}"))
        .find(|id| !store.exists(id))
        .expect("unbounded range")
}

fn print_outcome(out: &TurnOutcome, session: &Session, phase_before: Phase) {
    let r = &out.response;
    if !r.gamemaster_guidance.trim().is_empty() {
        println!("GM: {}", r.gamemaster_guidance.trim());
    }
    if !r.aegis_reaction.trim().is_empty() {
        println!("AEGIS: {}", r.aegis_reaction.trim());
    }
    if let Some(clue) = &out.state_delta.clue_delivered {
        println!("CLUE {}: {}", clue.clue_id, clue.title);
        for line in clue.content.lines() {
            println!("  {line}");
        }
    }
    if out.phase_after != phase_before {
        print_phase(session);
    }
}

fn print_phase(session: &Session) {
    let script = session.script();
    match session.state().phase {
        Phase::Scene(k) => {
            let scene = script.scene(k).expect("phase names a scene");
            println!("GM: [Scene {k}: {}]", scene.title);
            if let Some(d) = &scene.decision {
                let ids: Vec<&str> = d.options.iter().map(|o| o.option_id.as_str()).collect();
                println!("GM: {} (/decide {k} {})", d.prompt_text, ids.join("|"));
            }
        }
        Phase::Ending => {
            println!("GM: [Ending] Choose what to do with what you found:");
            for e in &script.endings {
                println!("GM:   /ending {} - {}", e.option_id, e.label);
            }
        }
        Phase::Auth => println!("GM: [Identity check]"),
        Phase::Intro | Phase::Done => {}
    }
}

fn play(args: PlayArgs) -> CmdResult {
    let (script_id, script) = load_script_arg(&args.script)?;
    let bundle = assemble_system_prompt(&persona_for(&script)?, &script, args.version)
        .map_err(|e| Failure::Findings(e.to_string()))?;
    let config = SessionConfig {
        provider: provider_config(&args),
        history_cap: args.history_cap,
    };
    config.provider.validate().map_err(runtime)?;
    let provider = args.provider.build().map_err(|e| runtime(format!("provider: {e}")))?;
    let store = Arc::new(SessionStore::open(&args.data_dir).map_err(runtime)?);
    let id = args.session_id.clone().unwrap_or_else(|| free_session_id(&store));
    let parts = SessionParts {
        id: id.clone(),
        script_id,
        script: Arc::new(script),
        bundle: Arc::new(bundle),
        config,
        provider,
        store,
    };
    let mut session = Session::start(parts).map_err(runtime)?;
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(runtime)?;

    println!("session: {id}");
    for line in session.intro_text().lines().filter(|l| !l.trim().is_empty()) {
        println!("GM: {line}");
    }
    let stdin = io::stdin();
    for line in stdin.lock().lines() {
        let line = line.map_err(runtime)?;
        let input = line.trim();
        if input.is_empty() {
            continue;
        }
        let phase_before = session.state().phase;
        let result = match input.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["/quit"] => break,
            ["/state"] => {
                let s = session.summary();
                println!(
                    "GM: phase {}, {} rounds, {} clues",
                    session.state().phase,
                    s.rounds,
                    s.clues
                );
                continue;
            }
            ["/decide", scene, option] => match scene.parse::<u32>() {
                Ok(scene) => session.submit_decision(scene, option),
                Err(_) => {
                    println!("ERROR: scene must be a number");
                    continue;
                }
            },
            ["/ending", option] => session.choose_ending(option),
            [cmd, ..] if cmd.starts_with('/') => {
                println!("ERROR: commands are /decide <scene> <option>, /ending <option>, /state, /quit");
                continue;
            }
            _ => rt.block_on(session.submit_input(input)),
        };
        match result {
            Ok(out) => print_outcome(&out, &session, phase_before),
            Err(e @ GameError::Store(_)) => return Err(runtime(e)),
            Err(e) => println!("ERROR: {e}"),
        }
        if session.state().phase == Phase::Done {
            break;
        }
    }
    println!("phase: {}", session.state().phase);
    println!("state hash: {}", session.state().state_hash());
    Ok(())
}

fn replay_cmd(log: PathBuf, arg: ScriptArg) -> CmdResult {
    let record = load_record_from_log(&log).map_err(|e| runtime(format!("{}: {e}", log.display())))?;
    let script = match &arg.script {
        Some(_) => load_script_arg(&arg)?.1,
        None => canonical_script(),
    };
    match replay(&record, &script) {
        Ok(state) => {
            println!("session: {}", record.session_id);
            println!("events: {}", record.events.len());
            println!("phase: {}", state.phase);
            println!("rounds: {}", state.rounds());
            println!("state hash: {}", state.state_hash());
            Ok(())
        }
        Err(e @ (ReplayError::Divergence { .. } | ReplayError::ScriptMismatch)) => {
            Err(Failure::Findings(e.to_string()))
        }
        Err(e) => Err(runtime(e)),
    }
}

fn collect_logs(dir: &Path) -> io::Result<Vec<PathBuf>> {
    let logs_in = |d: &Path| -> io::Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = fs::read_dir(d)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "log"))
            .collect();
        v.sort();
        Ok(v)
    };
    let direct = logs_in(dir)?;
    let nested = dir.join("sessions");
    if direct.is_empty() && nested.is_dir() {
        return logs_in(&nested);
    }
    Ok(direct)
}

#[derive(Serialize)]
struct Stats {
    sessions: usize,
    mean_rounds: String,
    min_rounds: u64,
    max_rounds: u64,
    rounds: BTreeMap<String, u64>,
    code_totals: BTreeMap<String, u32>,
    code_sessions: BTreeMap<String, usize>,
}

fn analyze(logs: PathBuf, codebook: Option<PathBuf>, out: PathBuf) -> CmdResult {
    let book = match &codebook {
        None => Codebook::builtin(),
        Some(p) => load_codebook_file(p).map_err(|e| match e {
            AnalysisError::Io(e) => runtime(format!("{}: {e}", p.display())),
            other => Failure::Findings(format!("{}: {other}", p.display())),
        })?,
    };
    let paths = collect_logs(&logs).map_err(|e| runtime(format!("{}: {e}", logs.display())))?;
    let records: Vec<SessionRecord> = paths
        .iter()
        .map(|p| load_record_from_log(p).map_err(|e| runtime(format!("{}: {e}", p.display()))))
        .collect::<Result<_, _>>()?;
    let stats = round_stats(&records).map_err(|e| Failure::Findings(e.to_string()))?;
    let matrix = usage_matrix(&records, &book);

    fs::create_dir_all(&out).map_err(runtime)?;
    let heatmap = out.join("heatmap.csv");
    write_heatmap(&heatmap, &matrix).map_err(runtime)?;
    let summary = Stats {
        sessions: records.len(),
        mean_rounds: stats.mean_2dp(),
        min_rounds: stats.min,
        max_rounds: stats.max,
        rounds: stats.per_session.iter().cloned().collect(),
        code_totals: StrategyCode::ALL
            .iter()
            .map(|c| (c.to_string(), matrix.row_total(*c)))
            .collect(),
        code_sessions: StrategyCode::ALL
            .iter()
            .map(|c| (c.to_string(), matrix.row_support(*c)))
            .collect(),
    };
    let stats_path = out.join("stats.json");
    let mut json = serde_json::to_string_pretty(&summary).map_err(runtime)?;
    json.push('\n');
    fs::write(&stats_path, json).map_err(runtime)?;

    println!("sessions: {}", records.len());
    println!("mean rounds: {}", summary.mean_rounds);
    for code in StrategyCode::ALL {
        println!(
            "{:<24} {:>4} turns in {:>2} sessions",
            code.to_string(),
            matrix.row_total(code),
            matrix.row_support(code)
        );
    }
    println!("wrote {}", heatmap.display());
    println!("wrote {}", stats_path.display());
    Ok(())
}

fn fixture(cmd: FixtureCommand) -> CmdResult {
    match cmd {
        FixtureCommand::Queue { out, extra } => {
            let replies: Vec<String> = padded_playthrough(&canonical_script(), extra)
                .into_iter()
                .map(|t| t.reply)
                .collect();
            let json = serde_json::to_string_pretty(&replies).map_err(runtime)?;
            fs::write(&out, json + "\n").map_err(runtime)?;
            println!("wrote {} replies to {}", replies.len(), out.display());
            Ok(())
        }
        FixtureCommand::Corpus { data_dir } => {
            let store = SessionStore::open(&data_dir).map_err(runtime)?;
            let plan = study_shaped_plan();
            write_corpus(&store, &plan, CANONICAL_SCRIPT_ID, &canonical_script()).map_err(runtime)?;
            println!("wrote {} sessions under {}", plan.sessions.len(), data_dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate(arg) => validate(arg),
        Command::ExportPrompt {
            script,
            version,
            out,
        } => export_prompt(script, version, out),
        Command::Play(args) => play(args),
        Command::Replay { log, script } => replay_cmd(log, script),
        Command::Analyze {
            logs,
            codebook,
            out,
        } => analyze(logs, codebook, out),
        Command::Fixture(cmd) => fixture(cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Findings(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
