//! Prompt templates and the structured-output contract.
//!
//! Every rendered request ends with an instruction demanding a single JSON
//! block of the stage's schema. [`parse_stage_response`] extracts the first
//! JSON block from a reply and validates it field by field, so a malformed
//! reply becomes a typed error the Observer can turn into feedback.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::alignment::Binding;
use crate::catalog::Verb;
use crate::goal::{Actor, Goal, GoalId, GoalKind, GoalLevel, GoalTree};
use crate::json::sha256_hex;
use crate::provider::{
    ChatMessage, ChatRequest, Role, StageTag, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    P1,
    P2,
    P4,
    #[serde(rename = "CRITIQUE")]
    Critique,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::P1, Stage::P2, Stage::P4, Stage::Critique];

    pub fn tag(self) -> StageTag {
        match self {
            Stage::P1 => StageTag::P1,
            Stage::P2 => StageTag::P2,
            Stage::P4 => StageTag::P4,
            Stage::Critique => StageTag::Critique,
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            Stage::P1 => "p1.txt",
            Stage::P2 => "p2.txt",
            Stage::P4 => "p4.txt",
            Stage::Critique => "critique.txt",
        }
    }

    pub fn required_placeholders(self) -> &'static [Placeholder] {
        match self {
            Stage::P1 => &[Placeholder::Brief, Placeholder::Stakeholder],
            Stage::P2 => &[Placeholder::HighGoals, Placeholder::ParentGoal],
            Stage::P4 => &[Placeholder::LowGoals, Placeholder::EndpointDigest],
            Stage::Critique => &[Placeholder::HighGoals],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag().as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Placeholder {
    Brief,
    Stakeholder,
    HighGoals,
    ParentGoal,
    LowGoals,
    EndpointDigest,
}

impl Placeholder {
    pub const ALL: [Placeholder; 6] = [
        Placeholder::Brief,
        Placeholder::Stakeholder,
        Placeholder::HighGoals,
        Placeholder::ParentGoal,
        Placeholder::LowGoals,
        Placeholder::EndpointDigest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::Brief => "brief",
            Placeholder::Stakeholder => "stakeholder",
            Placeholder::HighGoals => "high_goals",
            Placeholder::ParentGoal => "parent_goal",
            Placeholder::LowGoals => "low_goals",
            Placeholder::EndpointDigest => "endpoint_digest",
        }
    }

    fn from_name(name: &str) -> Option<Placeholder> {
        Placeholder::ALL.into_iter().find(|p| p.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("{stage} template is missing placeholder {{{{{placeholder}}}}}")]
    MissingPlaceholder { stage: Stage, placeholder: &'static str },
    #[error("{stage} template uses unknown placeholder {{{{{name}}}}}")]
    UnknownPlaceholder { stage: Stage, name: String },
    #[error("{stage} template has an unterminated placeholder")]
    Unterminated { stage: Stage },
}

enum Segment {
    Text(String),
    Slot(Placeholder),
}

fn split_template(stage: Stage, body: &str) -> Result<Vec<Segment>, TemplateError> {
    let mut segments = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find("{{") {
        if open > 0 {
            segments.push(Segment::Text(rest[..open].to_string()));
        }
        let after = &rest[open + 2..];
        let close = after
            .find("}}")
            .ok_or(TemplateError::Unterminated { stage })?;
        let name = after[..close].trim();
        let slot = Placeholder::from_name(name).ok_or_else(|| TemplateError::UnknownPlaceholder {
            stage,
            name: name.to_string(),
        })?;
        segments.push(Segment::Slot(slot));
        rest = &after[close + 2..];
    }
    if !rest.is_empty() {
        segments.push(Segment::Text(rest.to_string()));
    }
    Ok(segments)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub stage: Stage,
    pub body: String,
}

impl PromptTemplate {
    pub fn new(stage: Stage, body: impl Into<String>) -> Result<Self, TemplateError> {
        let body = body.into();
        let segments = split_template(stage, &body)?;
        for required in stage.required_placeholders() {
            if !segments
                .iter()
                .any(|s| matches!(s, Segment::Slot(p) if p == required))
            {
                return Err(TemplateError::MissingPlaceholder {
                    stage,
                    placeholder: required.name(),
                });
            }
        }
        Ok(PromptTemplate { stage, body })
    }

    fn fill(&self, values: &BTreeMap<Placeholder, String>) -> Result<String, PromptError> {
        let mut out = String::new();
        for segment in split_template(self.stage, &self.body).map_err(PromptError::Template)? {
            match segment {
                Segment::Text(t) => out.push_str(&t),
                Segment::Slot(p) => match values.get(&p) {
                    Some(v) => out.push_str(v),
                    None => return Err(PromptError::MissingContext(p.name())),
                },
            }
        }
        Ok(out)
    }
}

/// The four stage templates plus the version recorded in sessions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<Stage, PromptTemplate>,
    version: String,
}

pub const BUILTIN_TEMPLATE_LABEL: &str = "seal-templates-1";

impl TemplateSet {
    pub fn builtin() -> Self {
        TemplateSet::from_bodies(
            BUILTIN_TEMPLATE_LABEL,
            [
                (Stage::P1, include_str!("../templates/p1.txt")),
                (Stage::P2, include_str!("../templates/p2.txt")),
                (Stage::P4, include_str!("../templates/p4.txt")),
                (Stage::Critique, include_str!("../templates/critique.txt")),
            ],
        )
        .expect("built-in templates are valid")
    }

    /// Builds a set from one body per stage. The version is `label+hash`
    /// where the hash covers every body, so edited templates get a new version.
    pub fn from_bodies<'a>(
        label: &str,
        bodies: impl IntoIterator<Item = (Stage, &'a str)>,
    ) -> Result<Self, TemplateError> {
        let mut templates = BTreeMap::new();
        for (stage, body) in bodies {
            templates.insert(stage, PromptTemplate::new(stage, body)?);
        }
        for stage in Stage::ALL {
            if !templates.contains_key(&stage) {
                return Err(TemplateError::MissingPlaceholder {
                    stage,
                    placeholder: stage.required_placeholders()[0].name(),
                });
            }
        }
        let mut hashed = String::new();
        for t in templates.values() {
            hashed.push_str(t.stage.tag().as_str());
            hashed.push('\0');
            hashed.push_str(&t.body);
            hashed.push('\0');
        }
        let version = format!("{label}+{}", &sha256_hex(hashed.as_bytes())[..12]);
        Ok(TemplateSet { templates, version })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn get(&self, stage: Stage) -> &PromptTemplate {
        &self.templates[&stage]
    }
}

/// Model settings copied into every request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSettings {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for RequestSettings {
    fn default() -> Self {
        RequestSettings {
            model_id: "unspecified".to_string(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

/// Session state a prompt can draw from.
#[derive(Debug, Clone, Copy, Default)]
pub struct PromptContext<'a> {
    pub brief: Option<&'a str>,
    pub actor: Option<&'a Actor>,
    pub tree: Option<&'a GoalTree>,
    pub endpoint_digest: Option<&'a str>,
    /// High-level goal to decompose (P2).
    pub parent: Option<&'a GoalId>,
    /// Goals to classify (CRITIQUE) or to map (P4). When absent, CRITIQUE
    /// uses every non-discarded high-level goal and P4 the mappable goals.
    pub targets: Option<&'a [GoalId]>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("missing context for placeholder {{{{{0}}}}}")]
    MissingContext(&'static str),
    #[error("no mappable goals to map")]
    EmptyMappableSet,
    #[error(transparent)]
    Template(TemplateError),
}

impl PromptError {
    pub fn code(&self) -> &'static str {
        match self {
            PromptError::MissingContext(_) => "MissingContext",
            PromptError::EmptyMappableSet => "EmptyMappableSet",
            PromptError::Template(_) => "InvalidTemplate",
        }
    }
}

pub const SYSTEM_MESSAGE: &str =
    "You are a requirements engineering assistant. Follow the requested output format exactly.";

fn goal_line(g: &Goal) -> String {
    let description = g.description.split_whitespace().collect::<Vec<_>>().join(" ");
    if description.is_empty() {
        format!("- {} {}", g.id, g.name)
    } else {
        format!("- {} {}: {}", g.id, g.name, description)
    }
}

fn goal_block<'a>(goals: impl Iterator<Item = &'a Goal>) -> String {
    goals.map(goal_line).collect::<Vec<_>>().join("\n")
}

fn non_empty(s: Option<&str>) -> Option<&str> {
    s.map(str::trim).filter(|s| !s.is_empty())
}

/// Goals the CRITIQUE stage classifies by default.
pub fn default_critique_targets(tree: &GoalTree) -> Vec<GoalId> {
    tree.high_goals()
        .filter(|g| !g.is_discarded())
        .map(|g| g.id.clone())
        .collect()
}

/// Goals the P4 stage maps by default.
pub fn default_map_targets(tree: &GoalTree) -> Vec<GoalId> {
    tree.mappable_goals().iter().map(|g| g.id.clone()).collect()
}

/// Renders a stage prompt into a chat request: a fixed system message, then
/// the filled template followed by the stage's output contract.
pub fn render_stage(
    stage: Stage,
    templates: &TemplateSet,
    ctx: &PromptContext<'_>,
    settings: &RequestSettings,
) -> Result<ChatRequest, PromptError> {
    let mut values = BTreeMap::new();
    if let Some(brief) = non_empty(ctx.brief) {
        values.insert(Placeholder::Brief, brief.to_string());
    }
    if let Some(actor) = ctx.actor.or(ctx.tree.map(|t| &t.actor)) {
        let mut s = actor.name.trim().to_string();
        if !actor.description.trim().is_empty() {
            s.push_str(&format!(" ({})", actor.description.trim()));
        }
        if !s.is_empty() {
            values.insert(Placeholder::Stakeholder, s);
        }
    }
    if let Some(digest) = non_empty(ctx.endpoint_digest) {
        values.insert(Placeholder::EndpointDigest, digest.to_string());
    }

    if let Some(tree) = ctx.tree {
        let resolve = |ids: &[GoalId]| -> Vec<&Goal> {
            ids.iter().filter_map(|id| tree.get(id)).collect()
        };
        match stage {
            Stage::P2 => {
                let highs = goal_block(tree.high_goals().filter(|g| !g.is_discarded()));
                if !highs.is_empty() {
                    values.insert(Placeholder::HighGoals, highs);
                }
                if let Some(parent) = ctx.parent.and_then(|p| tree.get(p)) {
                    if parent.level == GoalLevel::High {
                        values.insert(Placeholder::ParentGoal, goal_line(parent));
                    }
                }
            }
            Stage::Critique => {
                let ids = ctx
                    .targets
                    .map(<[GoalId]>::to_vec)
                    .unwrap_or_else(|| default_critique_targets(tree));
                let block = goal_block(resolve(&ids).into_iter());
                if !block.is_empty() {
                    values.insert(Placeholder::HighGoals, block);
                }
            }
            Stage::P4 => {
                let ids = ctx
                    .targets
                    .map(<[GoalId]>::to_vec)
                    .unwrap_or_else(|| default_map_targets(tree));
                let goals = resolve(&ids);
                if goals.is_empty() {
                    return Err(PromptError::EmptyMappableSet);
                }
                values.insert(Placeholder::LowGoals, goal_block(goals.into_iter()));
            }
            Stage::P1 => {}
        }
    } else if stage == Stage::P4 {
        return Err(PromptError::EmptyMappableSet);
    }

    for required in stage.required_placeholders() {
        if !values.contains_key(required) {
            return Err(PromptError::MissingContext(required.name()));
        }
    }

    let mut user = templates.get(stage).fill(&values)?;
    if !user.ends_with('\n') {
        user.push('\n');
    }
    user.push('\n');
    user.push_str(output_contract(stage));

    Ok(ChatRequest {
        messages: vec![
            ChatMessage::new(Role::System, SYSTEM_MESSAGE),
            ChatMessage::new(Role::User, user),
        ],
        temperature: settings.temperature,
        max_tokens: settings.max_tokens,
        model_id: settings.model_id.clone(),
        stage_tag: stage.tag(),
    })
}

/// Instruction appended to each stage prompt.
pub fn output_contract(stage: Stage) -> &'static str {
    match stage {
        Stage::P1 | Stage::P2 => GOALS_CONTRACT,
        Stage::Critique => CRITIQUE_CONTRACT,
        Stage::P4 => MAPPING_CONTRACT,
    }
}

const GOALS_CONTRACT: &str = r#"Output format: answer with exactly one fenced JSON block (```json ... ```) of this shape:
{"goals": [{"name": "<short goal name>", "description": "<one sentence>", "kind": "functional" | "non_functional" | "unknown"}]}
"name" must not be empty. "kind" is optional.
"#;

const CRITIQUE_CONTRACT: &str = r#"Output format: answer with exactly one fenced JSON block (```json ... ```) of this shape:
{"verdicts": [{"goal_id": "<id from the list>", "kind": "functional" | "non_functional", "rationale": "<optional short reason>"}]}
Give exactly one verdict for every goal listed above.
"#;

const MAPPING_CONTRACT: &str = r#"Output format: answer with exactly one fenced JSON block (```json ... ```) of this shape:
{"mappings": [
  {"goal_id": "<id>", "steps": [{"verb": "GET", "path": "/path/{template}", "bindings": {"<parameter name>": <binding>}}]},
  {"goal_id": "<id>", "unmappable_reason": "<why the current endpoints cannot enforce this goal>"}
]}
A <binding> is one of {"literal": <JSON value>}, {"output_of": {"step": <index of an earlier step, starting at 0>, "field": "<field path in that step's response>"}} or {"actor_input": "<what the actor provides>"}. "bindings" is optional.
Give exactly one entry per goal listed above. Each entry has either "steps" (at least one) or "unmappable_reason", never both. Use only verb and path pairs from the endpoint list.
"#;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalDraft {
    pub name: String,
    pub description: String,
    pub kind_claim: GoalKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepDraft {
    pub verb: Verb,
    pub path: String,
    pub bindings: BTreeMap<String, Binding>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingOutcome {
    Steps(Vec<StepDraft>),
    Unmappable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingDraft {
    pub goal_id: GoalId,
    pub outcome: MappingOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindVerdict {
    pub goal_id: GoalId,
    pub kind: GoalKind,
    pub rationale: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOutput {
    Goals(Vec<GoalDraft>),
    Mappings(Vec<MappingDraft>),
    Verdicts(Vec<KindVerdict>),
}

impl StageOutput {
    /// Serializes to the JSON shape the output contract asks for.
    pub fn to_contract_json(&self) -> Value {
        match self {
            StageOutput::Goals(goals) => json!({
                "goals": goals.iter().map(|g| json!({
                    "name": g.name,
                    "description": g.description,
                    "kind": g.kind_claim.as_str(),
                })).collect::<Vec<_>>()
            }),
            StageOutput::Verdicts(verdicts) => json!({
                "verdicts": verdicts.iter().map(|v| {
                    let mut o = json!({"goal_id": v.goal_id.to_string(), "kind": v.kind.as_str()});
                    if let Some(r) = &v.rationale {
                        o["rationale"] = Value::String(r.clone());
                    }
                    o
                }).collect::<Vec<_>>()
            }),
            StageOutput::Mappings(mappings) => json!({
                "mappings": mappings.iter().map(|m| match &m.outcome {
                    MappingOutcome::Steps(steps) => json!({
                        "goal_id": m.goal_id.to_string(),
                        "steps": steps.iter().map(|s| json!({
                            "verb": s.verb.as_str(),
                            "path": s.path,
                            "bindings": serde_json::to_value(&s.bindings).unwrap_or(Value::Null),
                        })).collect::<Vec<_>>()
                    }),
                    MappingOutcome::Unmappable(reason) => json!({
                        "goal_id": m.goal_id.to_string(),
                        "unmappable_reason": reason,
                    }),
                }).collect::<Vec<_>>()
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("no JSON block found in the response")]
    NoStructuredBlock,
    #[error("response violates the output schema: {}", join_violations(.0))]
    SchemaViolation(Vec<Violation>),
    #[error("response names goal ids that were not in the request: {}", join_ids(.0))]
    UnknownGoalIdInResponse(Vec<GoalId>),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

fn join_ids(ids: &[GoalId]) -> String {
    ids.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

impl ParseError {
    pub fn code(&self) -> &'static str {
        match self {
            ParseError::NoStructuredBlock => "NoStructuredBlock",
            ParseError::SchemaViolation(_) => "SchemaViolation",
            ParseError::UnknownGoalIdInResponse(_) => "UnknownGoalIdInResponse",
        }
    }
}

/// Result of locating a JSON block in free text.
enum Block {
    Parsed(Value),
    /// A fenced block that failed to parse.
    Invalid(String),
}

/// Finds the first JSON block: the first fenced code block whose body is a
/// JSON object or array, otherwise the first balanced `{...}`/`[...]` span
/// that parses. A fence tagged `json` that does not parse is reported.
fn extract_json_block(content: &str) -> Option<Block> {
    let mut rest = content;
    let mut invalid_json_fence = None;
    while let Some(open) = rest.find("```") {
        let after_ticks = &rest[open + 3..];
        let (info, body_start) = match after_ticks.find('\n') {
            Some(nl) => (after_ticks[..nl].trim(), &after_ticks[nl + 1..]),
            None => break,
        };
        let Some(close) = body_start.find("```") else {
            break;
        };
        let body = body_start[..close].trim();
        if body.starts_with('{') || body.starts_with('[') {
            match serde_json::from_str::<Value>(body) {
                Ok(v) => return Some(Block::Parsed(v)),
                Err(e) if info.eq_ignore_ascii_case("json") && invalid_json_fence.is_none() => {
                    invalid_json_fence = Some(e.to_string());
                }
                Err(_) => {}
            }
        }
        rest = &body_start[close + 3..];
    }
    if let Some(err) = invalid_json_fence {
        return Some(Block::Invalid(err));
    }
    let bytes = content.as_bytes();
    let mut start = 0;
    while let Some(pos) = content[start..].find(['{', '[']) {
        let begin = start + pos;
        if let Some(end) = balanced_end(bytes, begin) {
            if let Ok(v) = serde_json::from_str::<Value>(&content[begin..end]) {
                return Some(Block::Parsed(v));
            }
        }
        start = begin + 1;
    }
    None
}

/// Index one past the bracket that closes the one at `begin`, honoring strings.
fn balanced_end(bytes: &[u8], begin: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(begin) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' | b'[' => depth += 1,
            b'}' | b']' => {
                depth = depth.checked_sub(1)?;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

struct Checker {
    violations: Vec<Violation>,
}

impl Checker {
    fn fail(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            path: path.into(),
            message: message.into(),
        });
    }

    fn list<'v>(&mut self, root: &'v Value, key: &str) -> Option<&'v Vec<Value>> {
        match root.get(key) {
            Some(Value::Array(items)) => Some(items),
            Some(_) => {
                self.fail(key, "expected an array");
                None
            }
            None => {
                self.fail(key, "required field is missing");
                None
            }
        }
    }

    fn object<'v>(&mut self, v: &'v Value, path: &str) -> Option<&'v Map<String, Value>> {
        let o = v.as_object();
        if o.is_none() {
            self.fail(path, "expected an object");
        }
        o
    }

    fn string(&mut self, o: &Map<String, Value>, path: &str, key: &str, required: bool) -> Option<String> {
        match o.get(key) {
            Some(Value::String(s)) if !s.trim().is_empty() => Some(s.trim().to_string()),
            Some(Value::String(_)) if required => {
                self.fail(format!("{path}.{key}"), "must not be empty");
                None
            }
            None | Some(Value::Null) if required => {
                self.fail(format!("{path}.{key}"), "required field is missing");
                None
            }
            Some(Value::String(_)) | None | Some(Value::Null) => None,
            Some(_) => {
                self.fail(format!("{path}.{key}"), "expected a string");
                None
            }
        }
    }

    fn goal_id(&mut self, o: &Map<String, Value>, path: &str) -> Option<GoalId> {
        let raw = match o.get("goal_id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            Some(_) => {
                self.fail(format!("{path}.goal_id"), "expected a string");
                return None;
            }
            None => {
                self.fail(format!("{path}.goal_id"), "required field is missing");
                return None;
            }
        };
        match raw.parse::<GoalId>() {
            Ok(id) => Some(id),
            Err(_) => {
                self.fail(format!("{path}.goal_id"), format!("{raw:?} is not a dotted goal id"));
                None
            }
        }
    }

    fn kind(&mut self, o: &Map<String, Value>, path: &str, required: bool) -> Option<GoalKind> {
        match o.get("kind") {
            None | Some(Value::Null) if !required => Some(GoalKind::Unknown),
            None | Some(Value::Null) => {
                self.fail(format!("{path}.kind"), "required field is missing");
                None
            }
            Some(Value::String(s)) => match s.trim().to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
                "functional" => Some(GoalKind::Functional),
                "non_functional" | "nonfunctional" => Some(GoalKind::NonFunctional),
                "unknown" => Some(GoalKind::Unknown),
                _ => {
                    self.fail(
                        format!("{path}.kind"),
                        format!("{s:?} is not one of functional, non_functional, unknown"),
                    );
                    None
                }
            },
            Some(_) => {
                self.fail(format!("{path}.kind"), "expected a string");
                None
            }
        }
    }
}

/// Extracts and validates the structured block of a stage reply.
///
/// `requested` lists the goal ids the request asked about (CRITIQUE and P4);
/// any other id in the reply is [`ParseError::UnknownGoalIdInResponse`].
/// Step paths are kept verbatim; checking them against the catalog is the
/// Observer's job.
pub fn parse_stage_response(
    stage: Stage,
    content: &str,
    requested: &[GoalId],
) -> Result<StageOutput, ParseError> {
    let root = match extract_json_block(content) {
        None => return Err(ParseError::NoStructuredBlock),
        Some(Block::Invalid(err)) => {
            return Err(ParseError::SchemaViolation(vec![Violation {
                path: "$".into(),
                message: format!("invalid JSON: {err}"),
            }]))
        }
        Some(Block::Parsed(v)) => v,
    };
    let mut c = Checker {
        violations: Vec::new(),
    };
    if !root.is_object() {
        c.fail("$", "expected a JSON object");
        return Err(ParseError::SchemaViolation(c.violations));
    }
    let output = match stage {
        Stage::P1 | Stage::P2 => StageOutput::Goals(parse_goals(&mut c, &root)),
        Stage::Critique => StageOutput::Verdicts(parse_verdicts(&mut c, &root)),
        Stage::P4 => StageOutput::Mappings(parse_mappings(&mut c, &root)),
    };
    if !c.violations.is_empty() {
        return Err(ParseError::SchemaViolation(c.violations));
    }
    let named: Vec<&GoalId> = match &output {
        StageOutput::Goals(_) => Vec::new(),
        StageOutput::Verdicts(v) => v.iter().map(|v| &v.goal_id).collect(),
        StageOutput::Mappings(m) => m.iter().map(|m| &m.goal_id).collect(),
    };
    let unknown: Vec<GoalId> = named
        .into_iter()
        .filter(|id| !requested.contains(id))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(ParseError::UnknownGoalIdInResponse(unknown));
    }
    Ok(output)
}

fn parse_goals(c: &mut Checker, root: &Value) -> Vec<GoalDraft> {
    let mut out = Vec::new();
    for (i, item) in c.list(root, "goals").into_iter().flatten().enumerate() {
        let path = format!("goals[{i}]");
        let Some(o) = c.object(item, &path) else { continue };
        let name = c.string(o, &path, "name", true);
        let description = c.string(o, &path, "description", false).unwrap_or_default();
        let kind = c.kind(o, &path, false);
        if let (Some(name), Some(kind_claim)) = (name, kind) {
            out.push(GoalDraft {
                name,
                description,
                kind_claim,
            });
        }
    }
    out
}

fn parse_verdicts(c: &mut Checker, root: &Value) -> Vec<KindVerdict> {
    let mut out: Vec<KindVerdict> = Vec::new();
    for (i, item) in c.list(root, "verdicts").into_iter().flatten().enumerate() {
        let path = format!("verdicts[{i}]");
        let Some(o) = c.object(item, &path) else { continue };
        let goal_id = c.goal_id(o, &path);
        let kind = c.kind(o, &path, true);
        let rationale = c.string(o, &path, "rationale", false);
        if let (Some(goal_id), Some(kind)) = (goal_id, kind) {
            if out.iter().any(|v| v.goal_id == goal_id) {
                c.fail(format!("{path}.goal_id"), format!("second verdict for goal {goal_id}"));
                continue;
            }
            out.push(KindVerdict {
                goal_id,
                kind,
                rationale,
            });
        }
    }
    out
}

fn parse_mappings(c: &mut Checker, root: &Value) -> Vec<MappingDraft> {
    let mut out: Vec<MappingDraft> = Vec::new();
    for (i, item) in c.list(root, "mappings").into_iter().flatten().enumerate() {
        let path = format!("mappings[{i}]");
        let Some(o) = c.object(item, &path) else { continue };
        let goal_id = c.goal_id(o, &path);
        let steps = o.get("steps").filter(|v| !v.is_null());
        let reason = o.get("unmappable_reason").filter(|v| !v.is_null());
        let outcome = match (steps, reason) {
            (Some(_), Some(_)) => {
                c.fail(&path, "has both steps and unmappable_reason");
                None
            }
            (None, None) => {
                c.fail(&path, "needs either steps or unmappable_reason");
                None
            }
            (None, Some(_)) => c
                .string(o, &path, "unmappable_reason", true)
                .map(MappingOutcome::Unmappable),
            (Some(steps), None) => parse_steps(c, steps, &path).map(MappingOutcome::Steps),
        };
        if let (Some(goal_id), Some(outcome)) = (goal_id, outcome) {
            if out.iter().any(|m| m.goal_id == goal_id) {
                c.fail(format!("{path}.goal_id"), format!("second mapping for goal {goal_id}"));
                continue;
            }
            out.push(MappingDraft { goal_id, outcome });
        }
    }
    out
}

fn parse_steps(c: &mut Checker, steps: &Value, path: &str) -> Option<Vec<StepDraft>> {
    let Some(items) = steps.as_array() else {
        c.fail(format!("{path}.steps"), "expected an array");
        return None;
    };
    if items.is_empty() {
        c.fail(format!("{path}.steps"), "must contain at least one step");
        return None;
    }
    let before = c.violations.len();
    let mut out = Vec::new();
    for (j, item) in items.iter().enumerate() {
        let spath = format!("{path}.steps[{j}]");
        let Some(o) = c.object(item, &spath) else { continue };
        let verb = match c.string(o, &spath, "verb", true) {
            Some(v) => match v.parse::<Verb>() {
                Ok(v) => Some(v),
                Err(_) => {
                    c.fail(format!("{spath}.verb"), format!("{v:?} is not an HTTP verb"));
                    None
                }
            },
            None => None,
        };
        let step_path = match o.get("path") {
            Some(Value::String(p)) if !p.is_empty() => Some(p.clone()),
            Some(Value::String(_)) | None | Some(Value::Null) => {
                c.fail(format!("{spath}.path"), "required field is missing");
                None
            }
            Some(_) => {
                c.fail(format!("{spath}.path"), "expected a string");
                None
            }
        };
        let mut bindings = BTreeMap::new();
        match o.get("bindings") {
            None | Some(Value::Null) => {}
            Some(Value::Object(map)) => {
                for (name, raw) in map {
                    match serde_json::from_value::<Binding>(raw.clone()) {
                        Ok(b) => {
                            bindings.insert(name.clone(), b);
                        }
                        Err(_) => c.fail(
                            format!("{spath}.bindings.{name}"),
                            "expected {\"literal\": ...}, {\"output_of\": {\"step\", \"field\"}} or {\"actor_input\": \"...\"}",
                        ),
                    }
                }
            }
            Some(_) => c.fail(format!("{spath}.bindings"), "expected an object"),
        }
        if let (Some(verb), Some(step_path)) = (verb, step_path) {
            out.push(StepDraft {
                verb,
                path: step_path,
                bindings,
            });
        }
    }
    (c.violations.len() == before).then_some(out)
}
