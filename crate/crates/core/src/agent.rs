//! The agent loop: a planner builds a round of tasks, an actor executes each
//! one against the provider, an observer judges the artifact (retrying with
//! feedback up to `inner_limit` times), and a reflector closes the round and
//! decides whether another one is worth running (at most `outer_limit`).

use alloc::boxed::Box;
use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::alignment::{
    compile_report, validate_call_plan, AlignmentState, Coverage, GoalMapping, Issue,
    MappingResult, ReportInputs, Subject, VALIDATION_FAILED,
};
use crate::catalog::{endpoint_digest, parse_json, CatalogError, DocumentFormat, EndpointCatalog};
use crate::goal::{GoalError, GoalId, GoalKind, GoalLevel, GoalSeed};
use crate::prompt::{
    default_critique_targets, parse_stage_response, render_stage, GoalDraft, KindVerdict,
    MappingDraft, MappingOutcome, ParseError, PromptContext, PromptError, RequestSettings, Stage,
    StageOutput, TemplateSet,
};
use crate::provider::{ChatMessage, ChatProvider, ProviderError, Role};
use crate::session::{Session, StageName, StageStatus, TranscriptEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub inner_limit: u32,
    pub outer_limit: u32,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            inner_limit: 3,
            outer_limit: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Autonomous,
    Interactive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    ExtractApi,
    ElicitHigh,
    Critique,
    Decompose { parent: GoalId },
    Map,
}

impl TaskKind {
    pub fn stage(&self) -> StageName {
        match self {
            TaskKind::ExtractApi => StageName::Extract,
            TaskKind::ElicitHigh => StageName::Elicit,
            TaskKind::Critique => StageName::Critique,
            TaskKind::Decompose { .. } => StageName::Decompose,
            TaskKind::Map => StageName::Map,
        }
    }

    /// Tasks whose failure ends the run.
    pub fn is_required(&self) -> bool {
        matches!(self, TaskKind::ExtractApi | TaskKind::ElicitHigh)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::ExtractApi => f.write_str("extract_api"),
            TaskKind::ElicitHigh => f.write_str("elicit_high"),
            TaskKind::Critique => f.write_str("critique"),
            TaskKind::Decompose { parent } => write!(f, "decompose({parent})"),
            TaskKind::Map => f.write_str("map"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    Running,
    Succeeded,
    Failed,
}

impl TaskStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskStatus::Succeeded | TaskStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub kind: TaskKind,
    /// Executions so far; 0 while pending.
    pub attempt: u32,
    pub status: TaskStatus,
    /// Findings of the last observation.
    pub issues: Vec<Issue>,
}

impl Task {
    pub fn new(kind: TaskKind) -> Self {
        Task {
            kind,
            attempt: 0,
            status: TaskStatus::Pending,
            issues: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Ok,
    Retry,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub verdict: Verdict,
    pub issues: Vec<Issue>,
    /// Correction request sent with the next attempt.
    pub feedback: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recommendation {
    Stop,
    Replan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reflection {
    pub round: u32,
    pub coverage: Coverage,
    pub unmapped_goals: Vec<GoalId>,
    /// High-level goals without sub-goals, to decompose again.
    pub reopen_high: Vec<GoalId>,
    /// Mappable goals without a valid plan that may be mapped again.
    pub reopen_low: Vec<GoalId>,
    pub recommendation: Recommendation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    /// True for single-stage runs outside the loop; these never reflect.
    pub manual: bool,
    pub tasks: Vec<Task>,
    /// Decompose tasks are still to be planned from the elicited goals.
    pub expand_decompose: bool,
    pub reflection: Option<Reflection>,
}

impl RoundRecord {
    fn is_complete(&self) -> bool {
        self.tasks.iter().all(|t| t.status.is_terminal())
    }
}

/// Where an interactive run waits for human review.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "point", rename_all = "snake_case")]
pub enum ReviewPoint {
    AfterElicit { goals: Vec<GoalId> },
    AfterDecompose { goals: Vec<GoalId> },
    AfterMap,
}

impl ReviewPoint {
    /// Goals that must leave `proposed` before the run resumes.
    pub fn scope(&self) -> &[GoalId] {
        match self {
            ReviewPoint::AfterElicit { goals } | ReviewPoint::AfterDecompose { goals } => goals,
            ReviewPoint::AfterMap => &[],
        }
    }

    pub fn stage(&self) -> StageName {
        match self {
            ReviewPoint::AfterElicit { .. } => StageName::Elicit,
            ReviewPoint::AfterDecompose { .. } => StageName::Decompose,
            ReviewPoint::AfterMap => StageName::Map,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunOutcome {
    Completed,
    SuspendedForReview(ReviewPoint),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AgentError {
    #[error("session not ready: {0}")]
    SessionNotReady(String),
    #[error("round {0} still has unfinished tasks")]
    RoundIncomplete(u32),
    #[error("task {task} failed after {attempts} attempt(s): {}", summarize(.issues))]
    TaskBudgetExhausted {
        task: String,
        attempts: u32,
        issues: Vec<Issue>,
    },
    #[error("stage {stage} has nothing to do: {detail}")]
    NothingToRun { stage: StageName, detail: String },
    #[error("limits must be at least 1 (inner {inner}, outer {outer})")]
    InvalidLimits { inner: u32, outer: u32 },
}

fn summarize(issues: &[Issue]) -> String {
    if issues.is_empty() {
        return "no details".into();
    }
    issues
        .iter()
        .filter(|i| i.is_blocking())
        .map(|i| format!("{} ({})", i.message, i.code))
        .collect::<Vec<_>>()
        .join("; ")
}

impl AgentError {
    pub fn code(&self) -> &'static str {
        match self {
            AgentError::SessionNotReady(_) => "SessionNotReady",
            AgentError::RoundIncomplete(_) => "RoundIncomplete",
            AgentError::TaskBudgetExhausted { .. } => "TaskBudgetExhausted",
            AgentError::NothingToRun { .. } => "NothingToRun",
            AgentError::InvalidLimits { .. } => "InvalidLimits",
        }
    }
}

/// Progress reported to the CLI and the HTTP service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProgressEvent {
    RunStarted { mode: Mode, limits: Limits },
    RoundStarted { round: u32, tasks: Vec<String> },
    TaskStarted { round: u32, task: String, attempt: u32 },
    TaskRetry { round: u32, task: String, attempt: u32, issues: Vec<String> },
    TaskFinished { round: u32, task: String, status: TaskStatus, attempts: u32 },
    Reflected { round: u32, coverage: String, recommendation: Recommendation },
    Suspended { point: ReviewPoint },
    RunFinished { coverage: Option<String> },
}

/// Turns the session's spec document into a catalog.
pub trait SpecDecoder {
    fn decode(
        &self,
        source_name: &str,
        format: DocumentFormat,
        text: &str,
    ) -> Result<EndpointCatalog, CatalogError>;
}

/// Decodes JSON documents only.
#[derive(Debug, Clone, Copy, Default)]
pub struct JsonSpecDecoder;

impl SpecDecoder for JsonSpecDecoder {
    fn decode(
        &self,
        source_name: &str,
        format: DocumentFormat,
        text: &str,
    ) -> Result<EndpointCatalog, CatalogError> {
        match format {
            DocumentFormat::Json => parse_json(source_name, text),
            DocumentFormat::Yaml => Err(CatalogError::MalformedDocument {
                detail: "this build cannot decode YAML documents".into(),
            }),
        }
    }
}

/// Why an execution produced no usable artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskFailure {
    Provider(ProviderError),
    Parse(ParseError),
    Prompt(PromptError),
    Catalog(CatalogError),
    Goal(GoalError),
}

impl TaskFailure {
    fn issue(&self) -> Issue {
        let (code, message) = match self {
            TaskFailure::Provider(e) => (e.code(), e.to_string()),
            TaskFailure::Parse(e) => (e.code(), e.to_string()),
            TaskFailure::Prompt(e) => (e.code(), e.to_string()),
            TaskFailure::Catalog(e) => (e.code(), e.to_string()),
            TaskFailure::Goal(e) => (e.code(), e.to_string()),
        };
        Issue::blocking(code, message, Subject::None)
    }

    /// Whether running the task again can help.
    fn retryable(&self) -> bool {
        match self {
            TaskFailure::Provider(e) => {
                matches!(e, ProviderError::Transport { .. } | ProviderError::FixtureMiss { .. })
            }
            TaskFailure::Parse(_) => true,
            TaskFailure::Prompt(_) | TaskFailure::Catalog(_) | TaskFailure::Goal(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Artifact {
    Catalog(EndpointCatalog),
    Goals(Vec<GoalDraft>),
    Verdicts(Vec<KindVerdict>),
    Mappings(Vec<MappingDraft>),
    Failure(TaskFailure),
}

/// Everything one execution of a task produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Execution {
    pub artifact: Artifact,
    /// Raw model reply, when the provider answered.
    pub reply: Option<String>,
    /// Goals the request asked about (critique and map).
    pub targets: Vec<GoalId>,
}

static JSON_DECODER: JsonSpecDecoder = JsonSpecDecoder;

type EventSink<'a> = Box<dyn FnMut(&ProgressEvent) + 'a>;

pub struct Pipeline<'a, P> {
    provider: P,
    templates: TemplateSet,
    settings: RequestSettings,
    limits: Limits,
    mode: Mode,
    decoder: &'a dyn SpecDecoder,
    timestamp: Option<String>,
    sink: Option<EventSink<'a>>,
}

impl<'a, P: ChatProvider> Pipeline<'a, P> {
    pub fn new(provider: P) -> Self {
        Pipeline {
            provider,
            templates: TemplateSet::builtin(),
            settings: RequestSettings::default(),
            limits: Limits::default(),
            mode: Mode::Autonomous,
            decoder: &JSON_DECODER,
            timestamp: None,
            sink: None,
        }
    }

    pub fn with_templates(mut self, templates: TemplateSet) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_settings(mut self, settings: RequestSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn with_limits(mut self, limits: Limits) -> Self {
        self.limits = limits;
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_decoder(mut self, decoder: &'a dyn SpecDecoder) -> Self {
        self.decoder = decoder;
        self
    }

    /// Clock reading stamped on the session and its report.
    pub fn with_timestamp(mut self, timestamp: impl Into<String>) -> Self {
        self.timestamp = Some(timestamp.into());
        self
    }

    pub fn with_events(mut self, sink: impl FnMut(&ProgressEvent) + 'a) -> Self {
        self.sink = Some(Box::new(sink));
        self
    }

    pub fn provider(&self) -> &P {
        &self.provider
    }

    pub fn into_provider(self) -> P {
        self.provider
    }

    pub fn limits(&self) -> Limits {
        self.limits
    }

    fn emit(&mut self, event: ProgressEvent) {
        if let Some(sink) = self.sink.as_mut() {
            sink(&event);
        }
    }

    fn check_ready(&self, session: &Session) -> Result<(), AgentError> {
        if self.limits.inner_limit == 0 || self.limits.outer_limit == 0 {
            return Err(AgentError::InvalidLimits {
                inner: self.limits.inner_limit,
                outer: self.limits.outer_limit,
            });
        }
        if session.brief.trim().is_empty() {
            return Err(AgentError::SessionNotReady("the session has no brief".into()));
        }
        if session.spec.text.trim().is_empty() {
            return Err(AgentError::SessionNotReady("the session has no API spec".into()));
        }
        Ok(())
    }

    /// Plans the next round. The first round elicits, classifies, decomposes
    /// and maps; later rounds only revisit what the last reflection reopened.
    /// Decompose tasks for freshly elicited goals are added once elicitation
    /// and critique have run.
    pub fn plan_tasks(&self, session: &Session) -> Result<Vec<TaskKind>, AgentError> {
        self.check_ready(session)?;
        let loop_rounds: Vec<&RoundRecord> = session.rounds.iter().filter(|r| !r.manual).collect();
        if let Some(open) = loop_rounds.last().filter(|r| r.reflection.is_none()) {
            return Ok(open
                .tasks
                .iter()
                .filter(|t| !t.status.is_terminal())
                .map(|t| t.kind.clone())
                .collect());
        }

        let mut plan = Vec::new();
        match loop_rounds.last().and_then(|r| r.reflection.as_ref()) {
            None => {
                plan.push(TaskKind::ExtractApi);
                let tree = &session.goals;
                let elicit = tree.high_goals().next().is_none();
                if elicit {
                    plan.push(TaskKind::ElicitHigh);
                }
                if elicit
                    || tree
                        .high_goals()
                        .any(|g| !g.is_discarded() && g.kind == GoalKind::Unknown)
                {
                    plan.push(TaskKind::Critique);
                }
                plan.extend(decompose_candidates(session).into_iter().map(|parent| TaskKind::Decompose { parent }));
                plan.push(TaskKind::Map);
            }
            Some(reflection) if reflection.recommendation == Recommendation::Stop => {}
            Some(reflection) => {
                if session.catalog.is_none() {
                    plan.push(TaskKind::ExtractApi);
                }
                for parent in &reflection.reopen_high {
                    let eligible = session
                        .goals
                        .get(parent)
                        .is_some_and(|g| !g.is_discarded())
                        && session.goals.children(parent).next().is_none();
                    if eligible {
                        plan.push(TaskKind::Decompose {
                            parent: parent.clone(),
                        });
                    }
                }
                let decomposing = plan.iter().any(|t| matches!(t, TaskKind::Decompose { .. }));
                if decomposing || !map_targets(session).is_empty() {
                    plan.push(TaskKind::Map);
                }
            }
        }
        Ok(plan)
    }

    /// Runs one attempt of a task: renders the prompt, calls the provider
    /// and parses the reply. Provider exchanges are appended to the transcript.
    pub fn execute_task(
        &mut self,
        task: &TaskKind,
        session: &mut Session,
        round: u32,
        attempt: u32,
        feedback: &[ChatMessage],
    ) -> Execution {
        let failed = |f: TaskFailure| Execution {
            artifact: Artifact::Failure(f),
            reply: None,
            targets: Vec::new(),
        };
        let (stage, targets, parent) = match task {
            TaskKind::ExtractApi => {
                let spec = &session.spec;
                return match self.decoder.decode(&spec.name, spec.format, &spec.text) {
                    Ok(catalog) => Execution {
                        artifact: Artifact::Catalog(catalog),
                        reply: None,
                        targets: Vec::new(),
                    },
                    Err(e) => failed(TaskFailure::Catalog(e)),
                };
            }
            TaskKind::ElicitHigh => (Stage::P1, Vec::new(), None),
            TaskKind::Critique => (Stage::Critique, default_critique_targets(&session.goals), None),
            TaskKind::Decompose { parent } => {
                match session.goals.get(parent) {
                    None => return failed(TaskFailure::Goal(GoalError::UnknownParent(parent.clone()))),
                    Some(g) if g.level != GoalLevel::High => {
                        return failed(TaskFailure::Goal(GoalError::LowLevelParent(parent.clone())))
                    }
                    Some(g) if g.is_discarded() => {
                        return failed(TaskFailure::Goal(GoalError::ParentDiscarded(parent.clone())))
                    }
                    Some(_) => {}
                }
                (Stage::P2, Vec::new(), Some(parent.clone()))
            }
            TaskKind::Map => {
                let targets = map_targets(session);
                if targets.is_empty() {
                    return Execution {
                        artifact: Artifact::Mappings(Vec::new()),
                        reply: None,
                        targets,
                    };
                }
                (Stage::P4, targets, None)
            }
        };

        let digest = match (stage, &session.catalog) {
            (Stage::P4, Some(c)) => Some(endpoint_digest(c)),
            _ => None,
        };
        let ctx = PromptContext {
            brief: Some(&session.brief),
            actor: Some(&session.goals.actor),
            tree: Some(&session.goals),
            endpoint_digest: digest.as_deref(),
            parent: parent.as_ref(),
            targets: if targets.is_empty() { None } else { Some(&targets) },
        };
        let mut request = match render_stage(stage, &self.templates, &ctx, &self.settings) {
            Ok(r) => r,
            Err(e) => return failed(TaskFailure::Prompt(e)),
        };
        request.messages.extend(feedback.iter().cloned());

        let result = self.provider.complete(&request);
        session.transcript.push(TranscriptEntry {
            seq: session.transcript.len() as u32 + 1,
            stage: request.stage_tag,
            round,
            task: task.to_string(),
            attempt,
            request,
            response: result.as_ref().ok().cloned(),
            error: result.as_ref().err().cloned(),
        });
        let response = match result {
            Ok(r) => r,
            Err(e) => {
                return Execution {
                    artifact: Artifact::Failure(TaskFailure::Provider(e)),
                    reply: None,
                    targets,
                }
            }
        };
        let artifact = match parse_stage_response(stage, &response.content, &targets) {
            Ok(StageOutput::Goals(g)) => Artifact::Goals(g),
            Ok(StageOutput::Verdicts(v)) => Artifact::Verdicts(v),
            Ok(StageOutput::Mappings(m)) => Artifact::Mappings(m),
            Err(e) => Artifact::Failure(TaskFailure::Parse(e)),
        };
        Execution {
            artifact,
            reply: Some(response.content),
            targets,
        }
    }

    /// Judges an execution. Blocking findings ask for a retry until the
    /// attempt budget is spent; advisory findings never do.
    pub fn observe_artifact(
        &self,
        task: &TaskKind,
        exec: &Execution,
        session: &Session,
        attempt: u32,
    ) -> Observation {
        let mut issues = Vec::new();
        let mut hopeless = false;
        match &exec.artifact {
            Artifact::Failure(f) => {
                issues.push(f.issue());
                hopeless = !f.retryable();
            }
            Artifact::Catalog(_) => {}
            Artifact::Goals(drafts) => {
                if drafts.is_empty() && matches!(task, TaskKind::ElicitHigh) {
                    issues.push(Issue::blocking(
                        "NoGoals",
                        "the answer lists no goals; at least one high-level goal is required",
                        Subject::None,
                    ));
                }
                if matches!(task, TaskKind::Decompose { .. }) {
                    for (i, d) in drafts.iter().enumerate() {
                        let text = format!("{} {}", d.name, d.description);
                        if let Some((a, b)) = compound_action(&text) {
                            issues.push(Issue::advisory(
                                "CompoundGoal",
                                format!("sub-goal {} ({:?}) combines more than one action: {a} / {b}", i + 1, d.name),
                                Subject::None,
                            ));
                        }
                        let terms = developer_terms(&text);
                        if !terms.is_empty() {
                            issues.push(Issue::advisory(
                                "DeveloperPerspective",
                                format!(
                                    "sub-goal {} ({:?}) reads like a development task: {}",
                                    i + 1,
                                    d.name,
                                    terms.join(", ")
                                ),
                                Subject::None,
                            ));
                        }
                    }
                }
            }
            Artifact::Verdicts(verdicts) => {
                for id in &exec.targets {
                    if !verdicts.iter().any(|v| &v.goal_id == id) {
                        issues.push(Issue::blocking(
                            "MissingVerdict",
                            format!("no functional/non-functional verdict for goal {id}"),
                            Subject::Goal(id.clone()),
                        ));
                    }
                }
                for v in verdicts {
                    if v.kind == GoalKind::Unknown {
                        issues.push(Issue::blocking(
                            "UndecidedVerdict",
                            format!("goal {} must be classified as functional or non_functional", v.goal_id),
                            Subject::Goal(v.goal_id.clone()),
                        ));
                    }
                }
            }
            Artifact::Mappings(drafts) => {
                let catalog = session.catalog.as_ref();
                for id in &exec.targets {
                    if !drafts.iter().any(|d| &d.goal_id == id) {
                        issues.push(Issue::blocking(
                            "MissingMapping",
                            format!("goal {id} has neither steps nor an unmappable_reason"),
                            Subject::Goal(id.clone()),
                        ));
                    }
                }
                for d in drafts {
                    let mappable = session
                        .goals
                        .mappable_goals()
                        .iter()
                        .any(|g| g.id == d.goal_id);
                    if !mappable {
                        issues.push(Issue::blocking(
                            "GoalNotMappable",
                            format!("goal {} is not a mappable low-level goal", d.goal_id),
                            Subject::Goal(d.goal_id.clone()),
                        ));
                        continue;
                    }
                    if let (MappingOutcome::Steps(steps), Some(catalog)) = (&d.outcome, catalog) {
                        match validate_call_plan(steps, catalog) {
                            Ok(v) => issues.extend(v.advisories),
                            Err(found) => issues.extend(found.into_iter().map(|mut i| {
                                i.message = format!("goal {}: {}", d.goal_id, i.message);
                                i
                            })),
                        }
                    }
                }
            }
        }

        let blocking: Vec<&Issue> = issues.iter().filter(|i| i.is_blocking()).collect();
        if blocking.is_empty() {
            return Observation {
                verdict: Verdict::Ok,
                issues,
                feedback: None,
            };
        }
        let feedback = exec.reply.as_ref().map(|_| {
            let mut text = String::from("Your previous answer could not be used:\n");
            for i in &blocking {
                text.push_str(&format!("- {}\n", i.message));
            }
            text.push_str("Answer again with one corrected JSON block in the same output format.");
            if blocking.iter().any(|i| i.code == "EndpointUnknown") {
                text.push_str(" Use only endpoints from the endpoint list.");
            }
            text
        });
        let verdict = if hopeless || attempt >= self.limits.inner_limit {
            Verdict::Fail
        } else {
            Verdict::Retry
        };
        Observation {
            verdict,
            issues,
            feedback,
        }
    }

    /// Closes the open loop round with a coverage summary and a stop/replan
    /// recommendation.
    pub fn reflect_round(&self, session: &Session) -> Result<Reflection, AgentError> {
        let (index, record) = session
            .rounds
            .iter()
            .enumerate()
            .rev()
            .find(|(_, r)| !r.manual)
            .ok_or(AgentError::RoundIncomplete(0))?;
        if record.reflection.is_some() || !record.is_complete() {
            return Err(AgentError::RoundIncomplete(record.round));
        }
        let round = record.round;
        let (coverage, unmapped_goals) = match &session.catalog {
            Some(catalog) => {
                let report = compile_report(ReportInputs {
                    tree: &session.goals,
                    catalog,
                    state: &session.alignment,
                    template_version: None,
                    provider: None,
                    generated_at: None,
                });
                (report.coverage, report.unmapped_goals)
            }
            None => (Coverage::new(0, 0), Vec::new()),
        };
        let reopen_high = decompose_candidates(session);
        let reopen_low = map_targets(session);
        let previous = session.rounds[..index]
            .iter()
            .rev()
            .filter(|r| !r.manual)
            .find_map(|r| r.reflection.as_ref());
        let stop = round >= self.limits.outer_limit
            || previous.is_some_and(|p| p.coverage.same_ratio(&coverage))
            || session.goals.mappable_goals().is_empty()
            || (reopen_high.is_empty() && reopen_low.is_empty());
        Ok(Reflection {
            round,
            coverage,
            unmapped_goals,
            reopen_high,
            reopen_low,
            recommendation: if stop {
                Recommendation::Stop
            } else {
                Recommendation::Replan
            },
        })
    }

    fn begin(&mut self, session: &mut Session) {
        if let Some(ts) = &self.timestamp {
            session.last_run_at = Some(ts.clone());
        }
        session.template_version = Some(self.templates.version().to_string());
        session.provider = Some(self.provider.identity());
    }

    /// Clears a review point once every goal in its scope is decided.
    fn resume(&mut self, session: &mut Session) -> Option<RunOutcome> {
        let point = session.pending_review.clone()?;
        if !session.awaiting_review().is_empty() {
            return Some(RunOutcome::SuspendedForReview(point));
        }
        let stage = point.stage();
        if session.status(stage) == StageStatus::Suspended {
            session.set_status(stage, StageStatus::Done);
        }
        session.pending_review = None;
        None
    }

    /// Runs plan/act/observe rounds with reflection until the reflector
    /// stops, the round budget is spent, or an interactive review point is hit.
    pub fn run_pipeline(&mut self, session: &mut Session) -> Result<RunOutcome, AgentError> {
        self.check_ready(session)?;
        self.begin(session);
        if let Some(outcome) = self.resume(session) {
            return Ok(outcome);
        }
        self.emit(ProgressEvent::RunStarted {
            mode: self.mode,
            limits: self.limits,
        });
        loop {
            let open = session
                .rounds
                .iter()
                .rposition(|r| !r.manual && r.reflection.is_none());
            let index = match open {
                Some(i) => i,
                None => {
                    if session.reflections() >= self.limits.outer_limit as usize {
                        break;
                    }
                    let plan = self.plan_tasks(session)?;
                    if plan.is_empty() {
                        break;
                    }
                    let round = session.rounds.iter().filter(|r| !r.manual).count() as u32 + 1;
                    let first = round == 1;
                    self.emit(ProgressEvent::RoundStarted {
                        round,
                        tasks: plan.iter().map(ToString::to_string).collect(),
                    });
                    session.rounds.push(RoundRecord {
                        round,
                        manual: false,
                        tasks: plan.into_iter().map(Task::new).collect(),
                        expand_decompose: first,
                        reflection: None,
                    });
                    session.rounds.len() - 1
                }
            };
            if let Some(point) = self.run_round_tasks(session, index)? {
                return Ok(self.suspend(session, point));
            }
            let reflection = self.reflect_round(session)?;
            self.emit(ProgressEvent::Reflected {
                round: reflection.round,
                coverage: reflection.coverage.to_string(),
                recommendation: reflection.recommendation,
            });
            let stop = reflection.recommendation == Recommendation::Stop;
            session.rounds[index].reflection = Some(reflection);
            if stop {
                break;
            }
        }
        session.refresh_report();
        self.emit(ProgressEvent::RunFinished {
            coverage: session.report.as_ref().map(|r| r.coverage.to_string()),
        });
        Ok(RunOutcome::Completed)
    }

    /// Runs a single stage outside the loop.
    pub fn run_stage(
        &mut self,
        session: &mut Session,
        stage: StageName,
    ) -> Result<RunOutcome, AgentError> {
        self.check_ready(session)?;
        self.begin(session);
        if let Some(outcome) = self.resume(session) {
            return Ok(outcome);
        }
        let nothing = |detail: &str| AgentError::NothingToRun {
            stage,
            detail: detail.to_string(),
        };
        let has_high = session.goals.high_goals().any(|g| !g.is_discarded());
        let tasks = match stage {
            StageName::Extract => vec![TaskKind::ExtractApi],
            StageName::Elicit => {
                if session.goals.high_goals().next().is_some() {
                    return Err(nothing("high-level goals were already elicited"));
                }
                vec![TaskKind::ElicitHigh]
            }
            StageName::Critique => {
                if !has_high {
                    return Err(AgentError::SessionNotReady("no high-level goals to classify; run elicit first".into()));
                }
                vec![TaskKind::Critique]
            }
            StageName::Decompose => {
                if !has_high {
                    return Err(AgentError::SessionNotReady("no high-level goals to decompose; run elicit first".into()));
                }
                let parents = decompose_candidates(session);
                if parents.is_empty() {
                    return Err(nothing("every high-level goal already has sub-goals"));
                }
                parents.into_iter().map(|parent| TaskKind::Decompose { parent }).collect()
            }
            StageName::Map => {
                if session.catalog.is_none() {
                    return Err(AgentError::SessionNotReady("no endpoint catalog; run extract first".into()));
                }
                if session.goals.mappable_goals().is_empty() {
                    return Err(AgentError::SessionNotReady("no mappable low-level goals".into()));
                }
                if map_targets(session).is_empty() {
                    return Err(nothing("every mappable goal already has a mapping"));
                }
                vec![TaskKind::Map]
            }
        };
        let round = session.rounds.iter().filter(|r| !r.manual).count() as u32;
        session.rounds.push(RoundRecord {
            round,
            manual: true,
            tasks: tasks.into_iter().map(Task::new).collect(),
            expand_decompose: false,
            reflection: None,
        });
        let index = session.rounds.len() - 1;
        if let Some(point) = self.run_round_tasks(session, index)? {
            return Ok(self.suspend(session, point));
        }
        session.refresh_report();
        Ok(RunOutcome::Completed)
    }

    fn suspend(&mut self, session: &mut Session, point: ReviewPoint) -> RunOutcome {
        session.set_status(point.stage(), StageStatus::Suspended);
        session.pending_review = Some(point.clone());
        session.refresh_report();
        self.emit(ProgressEvent::Suspended {
            point: point.clone(),
        });
        RunOutcome::SuspendedForReview(point)
    }

    /// Executes the pending tasks of a round in order. Returns a review
    /// point when an interactive run must pause.
    fn run_round_tasks(
        &mut self,
        session: &mut Session,
        index: usize,
    ) -> Result<Option<ReviewPoint>, AgentError> {
        loop {
            let next = session.rounds[index]
                .tasks
                .iter()
                .position(|t| !t.status.is_terminal());
            let next_is_map_or_end = next.is_none_or(|i| session.rounds[index].tasks[i].kind == TaskKind::Map);
            if session.rounds[index].expand_decompose && next_is_map_or_end {
                session.rounds[index].expand_decompose = false;
                let planned: BTreeSet<GoalId> = session.rounds[index]
                    .tasks
                    .iter()
                    .filter_map(|t| match &t.kind {
                        TaskKind::Decompose { parent } => Some(parent.clone()),
                        _ => None,
                    })
                    .collect();
                let new: Vec<Task> = decompose_candidates(session)
                    .into_iter()
                    .filter(|p| !planned.contains(p))
                    .map(|parent| Task::new(TaskKind::Decompose { parent }))
                    .collect();
                if !new.is_empty() {
                    let at = next.unwrap_or(session.rounds[index].tasks.len());
                    session.rounds[index].tasks.splice(at..at, new);
                    continue;
                }
            }
            let Some(ti) = next else {
                return Ok(None);
            };
            let point = self.run_task(session, index, ti)?;
            if self.mode == Mode::Interactive {
                if let Some(point) = point {
                    return Ok(Some(point));
                }
                let tasks = &session.rounds[index].tasks;
                let was_decompose = matches!(tasks[ti].kind, TaskKind::Decompose { .. });
                let more_decompose = tasks[ti + 1..]
                    .iter()
                    .any(|t| matches!(t.kind, TaskKind::Decompose { .. }) && !t.status.is_terminal());
                if was_decompose && !more_decompose {
                    let round = session.rounds[index].round.max(1);
                    let goals: Vec<GoalId> = session
                        .goals
                        .low_goals()
                        .filter(|g| g.origin_round == round && !g.is_discarded())
                        .map(|g| g.id.clone())
                        .collect();
                    return Ok(Some(ReviewPoint::AfterDecompose { goals }));
                }
            }
        }
    }

    /// The inner loop for one task.
    fn run_task(
        &mut self,
        session: &mut Session,
        index: usize,
        ti: usize,
    ) -> Result<Option<ReviewPoint>, AgentError> {
        let kind = session.rounds[index].tasks[ti].kind.clone();
        let round = session.rounds[index].round.max(1);
        let label = kind.to_string();
        let mut feedback: Vec<ChatMessage> = Vec::new();
        let mut last: Option<(Execution, Observation)> = None;

        for attempt in 1..=self.limits.inner_limit {
            {
                let task = &mut session.rounds[index].tasks[ti];
                task.attempt = attempt;
                task.status = TaskStatus::Running;
            }
            self.emit(ProgressEvent::TaskStarted {
                round,
                task: label.clone(),
                attempt,
            });
            let exec = self.execute_task(&kind, session, round, attempt, &feedback);
            let obs = self.observe_artifact(&kind, &exec, session, attempt);
            session.rounds[index].tasks[ti].issues = obs.issues.clone();
            match obs.verdict {
                Verdict::Ok => {
                    let point = self.commit(session, &kind, exec, round);
                    return Ok(self.finish_task(session, index, ti, TaskStatus::Succeeded, point));
                }
                Verdict::Retry => {
                    self.emit(ProgressEvent::TaskRetry {
                        round,
                        task: label.clone(),
                        attempt,
                        issues: obs
                            .issues
                            .iter()
                            .filter(|i| i.is_blocking())
                            .map(|i| i.message.clone())
                            .collect(),
                    });
                    feedback = match (&exec.reply, &obs.feedback) {
                        (Some(reply), Some(fb)) => vec![
                            ChatMessage::new(Role::Assistant, reply.clone()),
                            ChatMessage::new(Role::User, fb.clone()),
                        ],
                        _ => Vec::new(),
                    };
                    last = Some((exec, obs));
                }
                Verdict::Fail => {
                    last = Some((exec, obs));
                    break;
                }
            }
        }

        let (exec, obs) = last.expect("inner_limit is at least 1");
        let attempts = session.rounds[index].tasks[ti].attempt;
        if kind == TaskKind::Map {
            self.commit_partial_map(session, &exec, round);
        }
        let point = self.finish_task(session, index, ti, TaskStatus::Failed, None);
        if kind.is_required() {
            return Err(AgentError::TaskBudgetExhausted {
                task: label,
                attempts,
                issues: obs.issues,
            });
        }
        Ok(point)
    }

    fn finish_task(
        &mut self,
        session: &mut Session,
        index: usize,
        ti: usize,
        status: TaskStatus,
        point: Option<ReviewPoint>,
    ) -> Option<ReviewPoint> {
        let (kind, attempts, round) = {
            let record = &mut session.rounds[index];
            let task = &mut record.tasks[ti];
            task.status = status;
            (task.kind.clone(), task.attempt, record.round)
        };
        let stage = kind.stage();
        let earlier_decompose_failed = stage == StageName::Decompose
            && session.rounds[index].tasks[..ti]
                .iter()
                .any(|t| t.kind.stage() == StageName::Decompose && t.status == TaskStatus::Failed);
        let stage_status = if status == TaskStatus::Failed || earlier_decompose_failed {
            StageStatus::Failed
        } else {
            StageStatus::Done
        };
        session.set_status(stage, stage_status);
        if stage == StageName::Map {
            session.refresh_report();
        }
        self.emit(ProgressEvent::TaskFinished {
            round,
            task: kind.to_string(),
            status,
            attempts,
        });
        match (&kind, self.mode) {
            (TaskKind::Map, Mode::Interactive) => Some(ReviewPoint::AfterMap),
            (_, Mode::Interactive) => point,
            _ => None,
        }
    }

    /// Applies an accepted artifact to the session.
    fn commit(
        &mut self,
        session: &mut Session,
        kind: &TaskKind,
        exec: Execution,
        round: u32,
    ) -> Option<ReviewPoint> {
        match (kind, exec.artifact) {
            (TaskKind::ExtractApi, Artifact::Catalog(c)) => {
                session.catalog = Some(c);
                None
            }
            (TaskKind::ElicitHigh, Artifact::Goals(drafts)) => {
                let ids = session
                    .goals
                    .ingest_goals(None, &seeds(&drafts), round)
                    .unwrap_or_default();
                Some(ReviewPoint::AfterElicit { goals: ids })
            }
            (TaskKind::Decompose { parent }, Artifact::Goals(drafts)) => {
                let _ = session.goals.ingest_goals(Some(parent), &seeds(&drafts), round);
                None
            }
            (TaskKind::Critique, Artifact::Verdicts(verdicts)) => {
                for v in verdicts {
                    let _ = session.goals.set_kind(&v.goal_id, v.kind);
                }
                None
            }
            (TaskKind::Map, Artifact::Mappings(drafts)) => {
                record_mappings(session, &drafts, &exec.targets, round);
                None
            }
            _ => None,
        }
    }

    /// Keeps the valid part of the last Map attempt; every other target is
    /// recorded as unmappable with [`VALIDATION_FAILED`].
    fn commit_partial_map(&mut self, session: &mut Session, exec: &Execution, round: u32) {
        let targets = if exec.targets.is_empty() {
            map_targets(session)
        } else {
            exec.targets.clone()
        };
        let drafts = match &exec.artifact {
            Artifact::Mappings(d) => d.as_slice(),
            _ => &[],
        };
        record_mappings(session, drafts, &targets, round);
    }
}

fn seeds(drafts: &[GoalDraft]) -> Vec<GoalSeed> {
    drafts
        .iter()
        .map(|d| GoalSeed {
            name: d.name.clone(),
            description: d.description.clone(),
            kind: GoalKind::Unknown,
        })
        .collect()
}

/// Stores each target's outcome: a valid plan, the model's unmappable
/// verdict, or [`VALIDATION_FAILED`] when neither is usable.
fn record_mappings(session: &mut Session, drafts: &[MappingDraft], targets: &[GoalId], round: u32) {
    let Some(catalog) = session.catalog.as_ref() else {
        return;
    };
    let mut state: AlignmentState = core::mem::take(&mut session.alignment);
    for id in targets {
        let draft = drafts.iter().find(|d| &d.goal_id == id);
        let mapping = match draft.map(|d| &d.outcome) {
            Some(MappingOutcome::Steps(steps)) => match validate_call_plan(steps, catalog) {
                Ok(v) => GoalMapping {
                    result: MappingResult::Mapped(v.plan),
                    round,
                    advisories: v.advisories,
                },
                Err(issues) => GoalMapping {
                    result: MappingResult::Unmappable {
                        reason: VALIDATION_FAILED.to_string(),
                        reopenable: true,
                    },
                    round,
                    advisories: issues,
                },
            },
            Some(MappingOutcome::Unmappable(reason)) => GoalMapping {
                result: MappingResult::Unmappable {
                    reason: reason.clone(),
                    reopenable: false,
                },
                round,
                advisories: Vec::new(),
            },
            None => GoalMapping {
                result: MappingResult::Unmappable {
                    reason: VALIDATION_FAILED.to_string(),
                    reopenable: true,
                },
                round,
                advisories: Vec::new(),
            },
        };
        state.mappings.insert(id.clone(), mapping);
    }
    session.alignment = state;
}

/// Non-discarded high-level goals without sub-goals.
fn decompose_candidates(session: &Session) -> Vec<GoalId> {
    session
        .goals
        .high_goals()
        .filter(|g| !g.is_discarded() && session.goals.children(&g.id).next().is_none())
        .map(|g| g.id.clone())
        .collect()
}

/// Mappable goals that still lack a valid plan.
pub fn map_targets(session: &Session) -> Vec<GoalId> {
    session
        .goals
        .mappable_goals()
        .into_iter()
        .filter(|g| session.alignment.needs_mapping(&g.id))
        .map(|g| g.id.clone())
        .collect()
}

const ACTION_VERBS: &[&str] = &[
    "access", "add", "analyze", "assign", "browse", "change", "check", "compare", "configure",
    "connect", "contact", "create", "delete", "discover", "download", "edit", "evaluate",
    "explore", "export", "fetch", "filter", "find", "follow", "identify", "import", "inspect",
    "invite", "list", "manage", "measure", "monitor", "notify", "publish", "rank", "rate",
    "receive", "register", "remove", "report", "restrict", "review", "search", "see", "select",
    "send", "set", "share", "sort", "submit", "track", "update", "upload", "view", "visualize",
];

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

fn is_action(word: &str) -> bool {
    let stem = word
        .strip_suffix("ing")
        .or_else(|| word.strip_suffix("es"))
        .or_else(|| word.strip_suffix('s'))
        .unwrap_or(word);
    ACTION_VERBS.contains(&word) || ACTION_VERBS.contains(&stem)
}

/// Flags text joining two action verbs with a coordinator ("find and
/// connect", "manage or restrict"). Returns the two verbs.
pub fn compound_action(text: &str) -> Option<(String, String)> {
    let w = words(text);
    for (i, word) in w.iter().enumerate() {
        if word != "and" && word != "or" {
            continue;
        }
        let after = w[i + 1..]
            .iter()
            .take(2)
            .find(|x| !matches!(x.as_str(), "then" | "also" | "to"));
        let Some(second) = after.filter(|x| is_action(x)) else {
            continue;
        };
        if let Some(first) = w[..i].iter().rev().take(8).find(|x| is_action(x)) {
            if first != second {
                return Some((first.clone(), second.clone()));
            }
        }
    }
    None
}

const DEVELOPER_TERMS: &[&str] = &[
    "backend", "cache", "codebase", "database", "deploy", "deployment", "endpoint", "endpoints",
    "implement", "implementation", "refactor", "schema", "server", "sql",
];

/// Terms suggesting a goal is phrased from a developer's point of view.
pub fn developer_terms(text: &str) -> Vec<String> {
    let mut found: Vec<String> = words(text)
        .into_iter()
        .filter(|w| DEVELOPER_TERMS.contains(&w.as_str()))
        .collect();
    found.dedup();
    found
}
