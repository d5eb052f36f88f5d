//! The `seal` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 pipeline or store failure,
//! 3 suspended for review.

use std::io::{BufRead, Write};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use seal_core::agent::{ProgressEvent, ReviewPoint};
use seal_core::catalog::DocumentFormat;
use seal_core::goal::{Decision, GoalLevel, GoalStatus};
use seal_core::session::{derive_session_id, SpecDocument, StageName};
use seal_core::{Actor, GoalId, Limits, Mode, RunOutcome, Session};

use crate::http::{self, ServiceConfig};
use crate::run::{run_session, ProviderChoice, RunError, RunRequest};
use crate::store::{Store, StoreError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;
pub const EXIT_SUSPENDED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "seal", version, about = "Map stakeholder goals onto REST API call plans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create a session from a brief, an actor and an API spec.
    Init(InitArgs),
    /// Run the full refinement loop or a single stage.
    Run(RunArgs),
    /// Accept or discard proposed goals.
    Review(ReviewArgs),
    /// Print the alignment report.
    Report(ReportArgs),
    /// Serve sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
#[group(id = "target", required = true, multiple = false)]
struct InitTarget {
    /// Session directory; its name becomes the session id.
    #[arg(long, value_name = "DIR")]
    session: Option<PathBuf>,
    /// Directory of sessions; the id is derived from the brief.
    #[arg(long, value_name = "DIR")]
    session_root: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InitArgs {
    #[arg(long, value_name = "FILE")]
    brief: PathBuf,
    #[arg(long, value_name = "TEXT")]
    actor: String,
    #[arg(long, value_name = "FILE")]
    spec: PathBuf,
    #[command(flatten)]
    target: InitTarget,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProviderKind {
    Live,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StageArg {
    Extract,
    Elicit,
    Critique,
    Decompose,
    Map,
}

impl From<StageArg> for StageName {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Extract => StageName::Extract,
            StageArg::Elicit => StageName::Elicit,
            StageArg::Critique => StageName::Critique,
            StageArg::Decompose => StageName::Decompose,
            StageArg::Map => StageName::Map,
        }
    }
}

#[derive(Debug, Args)]
struct ProviderArgs {
    /// Defaults to replay when --fixture is given, live otherwise.
    #[arg(long, value_enum)]
    provider: Option<ProviderKind>,
    /// Replay fixture file.
    #[arg(long, value_name = "FILE")]
    fixture: Option<PathBuf>,
    /// TOML file with url, model, key; SEAL_LLM_* variables override it.
    #[arg(long, value_name = "FILE")]
    llm_config: Option<PathBuf>,
    /// Write the live exchanges as a replay fixture.
    #[arg(long, value_name = "FILE")]
    record: Option<PathBuf>,
}

impl ProviderArgs {
    fn choice(&self) -> Result<Option<ProviderChoice>, String> {
        let kind = match (self.provider, &self.fixture) {
            (Some(k), _) => k,
            (None, Some(_)) => ProviderKind::Replay,
            (None, None) if self.llm_config.is_some() || self.record.is_some() => ProviderKind::Live,
            (None, None) => return Ok(None),
        };
        match kind {
            ProviderKind::Replay => {
                let fixture = self
                    .fixture
                    .clone()
                    .ok_or("--provider replay requires --fixture FILE")?;
                if self.record.is_some() {
                    return Err("--record only applies to the live provider".into());
                }
                Ok(Some(ProviderChoice::Replay { fixture }))
            }
            ProviderKind::Live => {
                if self.fixture.is_some() {
                    return Err("--fixture only applies to the replay provider".into());
                }
                Ok(Some(ProviderChoice::Live {
                    config: self.llm_config.clone(),
                    record: self.record.clone(),
                }))
            }
        }
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long, value_name = "DIR")]
    session: PathBuf,
    #[arg(long, value_enum)]
    stage: Option<StageArg>,
    #[command(flatten)]
    provider: ProviderArgs,
    #[arg(long, value_name = "N", default_value_t = Limits::default().inner_limit)]
    max_inner: u32,
    #[arg(long, value_name = "N", default_value_t = Limits::default().outer_limit)]
    max_outer: u32,
    /// Pause for goal review after elicitation, decomposition and mapping.
    #[arg(long, conflicts_with = "non_interactive")]
    interactive: bool,
    /// Never read from the terminal (the default).
    #[arg(long)]
    non_interactive: bool,
    /// Do not print progress lines.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DecisionArg {
    Accept,
    Discard,
}

#[derive(Debug, Args)]
struct ReviewArgs {
    #[arg(long, value_name = "DIR")]
    session: PathBuf,
    /// Decide one goal without prompting.
    #[arg(long, value_name = "ID", requires = "decision")]
    goal: Option<String>,
    #[arg(long, value_enum, requires = "goal")]
    decision: Option<DecisionArg>,
    #[arg(long, value_name = "TEXT", requires = "goal")]
    reason: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    Text,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long, value_name = "DIR")]
    session: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: ReportFormat,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, value_name = "DIR")]
    session_root: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
    bind: IpAddr,
    /// Directory of built UI assets served at `/`.
    #[arg(long, value_name = "DIR")]
    ui: Option<PathBuf>,
    #[command(flatten)]
    provider: ProviderArgs,
}

/// Terminal streams plus whether stdin is interactive.
pub struct Console<'a> {
    pub stdin: &'a mut dyn BufRead,
    pub stdout: &'a mut dyn Write,
    pub stderr: &'a mut dyn Write,
    pub tty: bool,
}

enum Failure {
    Usage(String),
    Store(StoreError),
    Run(RunError),
    Other { code: &'static str, message: String },
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        Failure::Store(e)
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        Failure::Run(e)
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run_command<I, T>(argv: I, console: &mut Console<'_>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(console.stdout, "{rendered}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(console.stderr, "{rendered}");
                    EXIT_USAGE
                }
            };
        }
    };
    let result = match cli.command {
        Command::Init(args) => init(args, console),
        Command::Run(args) => run(args, console),
        Command::Review(args) => review(args, console),
        Command::Report(args) => report(args, console),
        Command::Serve(args) => serve(args, console),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(console.stderr, "error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Store(e)) => fail(console, e.code(), &e.to_string()),
        Err(Failure::Run(e)) => fail(console, e.code(), &e.to_string()),
        Err(Failure::Other { code, message }) => fail(console, code, &message),
    }
}

fn fail(console: &mut Console<'_>, code: &str, message: &str) -> i32 {
    let _ = writeln!(console.stderr, "error[{code}]: {message}");
    EXIT_FAILURE
}

fn read_file(path: &Path, what: &str) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Other {
        code: "IoFailure",
        message: format!("cannot read {what} {}: {e}", path.display()),
    })
}

fn init(args: InitArgs, console: &mut Console<'_>) -> Result<i32, Failure> {
    let brief = read_file(&args.brief, "brief")?;
    let spec_text = read_file(&args.spec, "spec")?;
    let (store, id) = match (&args.target.session, &args.target.session_root) {
        (Some(dir), _) => Store::for_session_dir(dir)?,
        (None, Some(root)) => (Store::new(root), derive_session_id(&brief)),
        (None, None) => unreachable!("clap enforces the target group"),
    };
    let spec_name = args
        .spec
        .file_name()
        .map_or_else(|| "spec".to_string(), |n| n.to_string_lossy().into_owned());
    let spec = SpecDocument::new(spec_name, DocumentFormat::sniff(&spec_text), spec_text);
    let session = Session::new(id, brief, Actor::new(args.actor.trim()), spec).map_err(|e| Failure::Other {
        code: e.code(),
        message: e.to_string(),
    })?;
    store.create(&session)?;
    store.append_event(&session.id, "session_created", serde_json::json!({ "id": session.id }))?;
    let _ = writeln!(console.stdout, "{}", store.session_dir(&session.id).display());
    Ok(EXIT_OK)
}

fn describe(event: &ProgressEvent) -> String {
    match event {
        ProgressEvent::RunStarted { mode, limits } => format!(
            "run started ({mode:?}, inner limit {}, outer limit {})",
            limits.inner_limit, limits.outer_limit
        ),
        ProgressEvent::RoundStarted { round, tasks } => {
            format!("round {round}: {}", tasks.join(", "))
        }
        ProgressEvent::TaskStarted { round, task, attempt } => {
            format!("  [{round}] {task} attempt {attempt}")
        }
        ProgressEvent::TaskRetry { task, attempt, issues, .. } => {
            format!("  retry {task} after attempt {attempt}: {}", issues.join("; "))
        }
        ProgressEvent::TaskFinished { task, status, attempts, .. } => {
            format!("  {task} {status:?} after {attempts} attempt(s)")
        }
        ProgressEvent::Reflected { round, coverage, recommendation } => {
            format!("round {round} reflected: coverage {coverage}, {recommendation:?}")
        }
        ProgressEvent::Suspended { point } => format!("suspended for review ({:?})", point.stage()),
        ProgressEvent::RunFinished { coverage } => match coverage {
            Some(c) => format!("run finished: coverage {c}"),
            None => "run finished".into(),
        },
    }
}

fn run(args: RunArgs, console: &mut Console<'_>) -> Result<i32, Failure> {
    let (store, id) = Store::for_session_dir(&args.session)?;
    let provider = args
        .provider
        .choice()
        .map_err(Failure::Usage)?
        .ok_or_else(|| Failure::Usage("choose a provider: --fixture FILE for replay, or --provider live".into()))?;
    let request = RunRequest {
        stage: args.stage.map(Into::into),
        limits: Limits {
            inner_limit: args.max_inner,
            outer_limit: args.max_outer,
        },
        mode: if args.interactive { Mode::Interactive } else { Mode::Autonomous },
        provider,
    };
    loop {
        let quiet = args.quiet;
        let stderr = &mut *console.stderr;
        let mut progress = |e: &ProgressEvent| {
            if !quiet {
                let _ = writeln!(stderr, "{}", describe(e));
            }
        };
        let (outcome, session) = run_session(&store, &id, &request, &mut progress)?;
        match outcome {
            RunOutcome::Completed => {
                print_summary(&store, &session, console);
                return Ok(EXIT_OK);
            }
            RunOutcome::SuspendedForReview(point) => {
                if !console.tty {
                    print_suspension(&point, &session, &args.session, console);
                    return Ok(EXIT_SUSPENDED);
                }
                let _lock = store.lock(&id)?;
                let mut session = store.load(&id)?;
                let decided = review_goals(&store, &mut session, point.scope(), console)?;
                store.save(&session)?;
                if !decided {
                    print_suspension(&point, &session, &args.session, console);
                    return Ok(EXIT_SUSPENDED);
                }
            }
        }
    }
}

fn print_summary(store: &Store, session: &Session, console: &mut Console<'_>) {
    let out = &mut *console.stdout;
    let _ = writeln!(
        out,
        "goals: {} high-level, {} low-level",
        session.goals.high_goals().count(),
        session.goals.low_goals().count()
    );
    match &session.report {
        Some(r) => {
            let _ = writeln!(out, "mapped: {}", r.mapped_count());
            let _ = writeln!(out, "coverage: {}", r.coverage);
            let _ = writeln!(out, "report: {}", store.session_dir(&session.id).join("report.txt").display());
        }
        None => {
            let _ = writeln!(out, "no report yet (mapping has not run)");
        }
    }
}

fn print_suspension(point: &ReviewPoint, session: &Session, dir: &Path, console: &mut Console<'_>) {
    let out = &mut *console.stdout;
    let _ = writeln!(out, "suspended for review after {}", point.stage());
    for id in session.awaiting_review() {
        if let Some(g) = session.goals.get(&id) {
            let _ = writeln!(out, "  {} {}", g.id, g.name);
        }
    }
    let _ = writeln!(
        out,
        "decide with `seal review --session {}`, then run again",
        dir.display()
    );
}

fn parse_decision(line: &str) -> Option<Option<Decision>> {
    match line.trim().to_ascii_lowercase().as_str() {
        "a" | "accept" => Some(Some(Decision::Accept)),
        "d" | "discard" => Some(Some(Decision::Discard)),
        "s" | "skip" | "" => Some(None),
        _ => None,
    }
}

fn read_line(console: &mut Console<'_>) -> Option<String> {
    let mut line = String::new();
    match console.stdin.read_line(&mut line) {
        Ok(0) | Err(_) => None,
        Ok(_) => Some(line.trim_end_matches(['\r', '\n']).to_string()),
    }
}

/// Walks `scope` one goal at a time. Returns false when input ended or the
/// user quit before every goal was decided.
fn review_goals(
    store: &Store,
    session: &mut Session,
    scope: &[GoalId],
    console: &mut Console<'_>,
) -> Result<bool, Failure> {
    let pending: Vec<GoalId> = scope
        .iter()
        .filter(|id| session.goals.get(id).is_some_and(|g| g.status == GoalStatus::Proposed))
        .cloned()
        .collect();
    let total = pending.len();
    let mut all = true;
    for (n, id) in pending.into_iter().enumerate() {
        let Some(goal) = session.goals.get(&id) else { continue };
        if goal.status != GoalStatus::Proposed {
            continue;
        }
        let level = match goal.level {
            GoalLevel::High => "high",
            GoalLevel::Low => "low",
        };
        let _ = writeln!(console.stdout, "[{}/{total}] {} {} ({level}, {})", n + 1, goal.id, goal.name, goal.kind.as_str());
        if !goal.description.is_empty() {
            let _ = writeln!(console.stdout, "    {}", goal.description);
        }
        let decision = loop {
            let _ = write!(console.stdout, "accept, discard, skip or quit? [a/d/s/q] ");
            let _ = console.stdout.flush();
            let Some(line) = read_line(console) else { return Ok(false) };
            if matches!(line.trim(), "q" | "quit") {
                return Ok(false);
            }
            match parse_decision(&line) {
                Some(d) => break d,
                None => {
                    let _ = writeln!(console.stdout, "please answer a, d, s or q");
                }
            }
        };
        let Some(decision) = decision else {
            all = false;
            continue;
        };
        let reason = if decision == Decision::Discard {
            loop {
                let _ = write!(console.stdout, "reason: ");
                let _ = console.stdout.flush();
                let Some(line) = read_line(console) else { return Ok(false) };
                if !line.trim().is_empty() {
                    break Some(line);
                }
            }
        } else {
            None
        };
        record_decision(store, session, &id, decision, reason.as_deref())?;
    }
    Ok(all)
}

fn record_decision(
    store: &Store,
    session: &mut Session,
    id: &GoalId,
    decision: Decision,
    reason: Option<&str>,
) -> Result<(), Failure> {
    session.apply_decision(id, decision, reason).map_err(|e| Failure::Other {
        code: e.code(),
        message: e.to_string(),
    })?;
    let payload = serde_json::json!({"goal_id": id, "decision": decision, "reason": reason});
    store.append_event(&session.id, "review_decision", payload)?;
    Ok(())
}

fn review(args: ReviewArgs, console: &mut Console<'_>) -> Result<i32, Failure> {
    let (store, id) = Store::for_session_dir(&args.session)?;
    let _lock = store.lock(&id)?;
    let mut session = store.load(&id)?;
    if let (Some(goal), Some(decision)) = (&args.goal, args.decision) {
        let goal_id: GoalId = goal.parse().map_err(|_| Failure::Other {
            code: "UnknownGoal",
            message: format!("{goal:?} is not a goal id"),
        })?;
        let decision = match decision {
            DecisionArg::Accept => Decision::Accept,
            DecisionArg::Discard => Decision::Discard,
        };
        record_decision(&store, &mut session, &goal_id, decision, args.reason.as_deref())?;
        store.save(&session)?;
        return Ok(EXIT_OK);
    }
    let scope: Vec<GoalId> = match &session.pending_review {
        Some(point) => point.scope().to_vec(),
        None => session
            .goals
            .iter()
            .filter(|g| g.status == GoalStatus::Proposed)
            .map(|g| g.id.clone())
            .collect(),
    };
    if scope.is_empty() {
        let _ = writeln!(console.stdout, "nothing to review");
        return Ok(EXIT_OK);
    }
    let result = review_goals(&store, &mut session, &scope, console);
    store.save(&session)?;
    result?;
    let left = session.awaiting_review().len();
    if left > 0 {
        let _ = writeln!(console.stdout, "{left} goal(s) still awaiting review");
    }
    Ok(EXIT_OK)
}

fn report(args: ReportArgs, console: &mut Console<'_>) -> Result<i32, Failure> {
    let (store, id) = Store::for_session_dir(&args.session)?;
    let session = store.load(&id)?;
    let report = session.build_report().map_err(|e| Failure::Other {
        code: "MapNotRun",
        message: e.to_string(),
    })?;
    match args.format {
        ReportFormat::Json => {
            let text = seal_core::json::to_canonical_string(&report).map_err(|e| Failure::Other {
                code: "IoFailure",
                message: e.to_string(),
            })?;
            let _ = write!(console.stdout, "{text}");
        }
        ReportFormat::Text => {
            let _ = write!(console.stdout, "{}", report.render_text());
        }
    }
    Ok(EXIT_OK)
}

fn serve(args: ServeArgs, console: &mut Console<'_>) -> Result<i32, Failure> {
    let provider = args.provider.choice().map_err(Failure::Usage)?;
    let config = ServiceConfig {
        root: args.session_root,
        provider,
        ui_dir: args.ui,
    };
    let addr = SocketAddr::new(args.bind, args.port);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Other {
        code: "IoFailure",
        message: e.to_string(),
    })?;
    let _ = writeln!(console.stderr, "serving {} on http://{addr}", config.root.display());
    runtime
        .block_on(http::serve(config, addr))
        .map_err(|e| Failure::Other {
            code: "IoFailure",
            message: e.to_string(),
        })?;
    Ok(EXIT_OK)
}
