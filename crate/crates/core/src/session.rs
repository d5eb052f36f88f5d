//! Persistent pipeline state.
//!
//! A [`Session`] serializes to `session.json`. The spec text and transcript
//! are skipped there: the store writes them as separate files and puts them
//! back on load.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agent::{ReviewPoint, RoundRecord};
use crate::alignment::{compile_report, AlignmentReport, AlignmentState, ReportError, ReportInputs};
use crate::catalog::{DocumentFormat, EndpointCatalog};
use crate::goal::{Actor, Decision, GoalError, GoalId, GoalStatus, GoalTree};
use crate::json::sha256_hex;
use crate::provider::{ChatRequest, ChatResponse, ProviderError, StageTag};

pub const SESSION_FORMAT: u32 = 1;

/// The spec document a session was initialized with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecDocument {
    pub name: String,
    pub format: DocumentFormat,
    pub sha256: String,
    #[serde(skip)]
    pub text: String,
}

impl SpecDocument {
    pub fn new(name: impl Into<String>, format: DocumentFormat, text: impl Into<String>) -> Self {
        let text = text.into();
        SpecDocument {
            name: name.into(),
            format,
            sha256: sha256_hex(text.as_bytes()),
            text,
        }
    }

    pub fn file_name(&self) -> String {
        format!("spec.{}", self.format.extension())
    }

    pub fn hash_matches(&self) -> bool {
        sha256_hex(self.text.as_bytes()) == self.sha256
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Extract,
    Elicit,
    Critique,
    Decompose,
    Map,
}

impl StageName {
    pub const ALL: [StageName; 5] = [
        StageName::Extract,
        StageName::Elicit,
        StageName::Critique,
        StageName::Decompose,
        StageName::Map,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Extract => "extract",
            StageName::Elicit => "elicit",
            StageName::Critique => "critique",
            StageName::Decompose => "decompose",
            StageName::Map => "map",
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown stage {0:?} (expected extract, elicit, critique, decompose or map)")]
pub struct UnknownStage(pub String);

impl FromStr for StageName {
    type Err = UnknownStage;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StageName::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| UnknownStage(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    #[default]
    NotRun,
    Suspended,
    Done,
    Failed,
}

/// One provider exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    /// 1-based position in call order.
    pub seq: u32,
    pub stage: StageTag,
    pub round: u32,
    pub task: String,
    pub attempt: u32,
    pub request: ChatRequest,
    pub response: Option<ChatResponse>,
    pub error: Option<ProviderError>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub seq: u32,
    pub goal_id: GoalId,
    pub decision: Decision,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SessionError {
    #[error("brief is empty")]
    EmptyBrief,
    #[error("actor name is empty")]
    EmptyActor,
    #[error("session id {0:?} is not usable as a directory name")]
    InvalidId(String),
    #[error(transparent)]
    Goal(#[from] GoalError),
}

impl SessionError {
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::EmptyBrief => "EmptyBrief",
            SessionError::EmptyActor => "EmptyActor",
            SessionError::InvalidId(_) => "InvalidSessionId",
            SessionError::Goal(e) => e.code(),
        }
    }
}

/// Session ids double as directory names.
pub fn valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Session id derived from the brief: the first 12 hex digits of its SHA-256.
pub fn derive_session_id(brief: &str) -> String {
    sha256_hex(brief.as_bytes())[..12].to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub format: u32,
    pub id: String,
    pub brief: String,
    pub spec: SpecDocument,
    pub catalog: Option<EndpointCatalog>,
    pub goals: GoalTree,
    #[serde(skip)]
    pub transcript: Vec<TranscriptEntry>,
    pub decisions: Vec<ReviewDecision>,
    pub alignment: AlignmentState,
    pub stage_status: BTreeMap<StageName, StageStatus>,
    pub template_version: Option<String>,
    pub provider: Option<String>,
    pub rounds: Vec<RoundRecord>,
    pub pending_review: Option<ReviewPoint>,
    /// Clock reading of the latest pipeline run (fixed for replay runs).
    pub last_run_at: Option<String>,
    pub report: Option<AlignmentReport>,
}

impl Session {
    pub fn new(
        id: impl Into<String>,
        brief: impl Into<String>,
        actor: Actor,
        spec: SpecDocument,
    ) -> Result<Self, SessionError> {
        let id = id.into();
        let brief = brief.into();
        if !valid_session_id(&id) {
            return Err(SessionError::InvalidId(id));
        }
        if brief.trim().is_empty() {
            return Err(SessionError::EmptyBrief);
        }
        if actor.name.trim().is_empty() {
            return Err(SessionError::EmptyActor);
        }
        Ok(Session {
            format: SESSION_FORMAT,
            id,
            brief,
            spec,
            catalog: None,
            goals: GoalTree::new(actor),
            transcript: Vec::new(),
            decisions: Vec::new(),
            alignment: AlignmentState::default(),
            stage_status: StageName::ALL.iter().map(|s| (*s, StageStatus::NotRun)).collect(),
            template_version: None,
            provider: None,
            rounds: Vec::new(),
            pending_review: None,
            last_run_at: None,
            report: None,
        })
    }

    pub fn actor(&self) -> &Actor {
        &self.goals.actor
    }

    pub fn status(&self, stage: StageName) -> StageStatus {
        self.stage_status.get(&stage).copied().unwrap_or_default()
    }

    pub fn set_status(&mut self, stage: StageName, status: StageStatus) {
        self.stage_status.insert(stage, status);
    }

    pub fn map_ran(&self) -> bool {
        matches!(
            self.status(StageName::Map),
            StageStatus::Done | StageStatus::Failed | StageStatus::Suspended
        )
    }

    /// Provider calls made so far per stage, for continuing a replay.
    pub fn stage_call_counts(&self) -> BTreeMap<StageTag, u32> {
        let mut counts = BTreeMap::new();
        for e in &self.transcript {
            if !matches!(e.error, Some(ProviderError::InvalidRequest { .. })) {
                *counts.entry(e.stage).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn reflections(&self) -> usize {
        self.rounds.iter().filter(|r| r.reflection.is_some()).count()
    }

    /// Records a review decision and refreshes the report if one exists.
    pub fn apply_decision(
        &mut self,
        goal_id: &GoalId,
        decision: Decision,
        reason: Option<&str>,
    ) -> Result<(), SessionError> {
        self.goals.apply_decision(goal_id, decision, reason)?;
        self.decisions.push(ReviewDecision {
            seq: self.decisions.len() as u32 + 1,
            goal_id: goal_id.clone(),
            decision,
            reason: reason.map(|r| r.trim().to_string()).filter(|r| !r.is_empty()),
        });
        if self.report.is_some() {
            self.refresh_report();
        }
        Ok(())
    }

    /// Goals still awaiting review at the pending review point.
    pub fn awaiting_review(&self) -> Vec<GoalId> {
        let Some(point) = &self.pending_review else {
            return Vec::new();
        };
        point
            .scope()
            .iter()
            .filter(|id| {
                self.goals
                    .get(id)
                    .is_some_and(|g| g.status == GoalStatus::Proposed)
            })
            .cloned()
            .collect()
    }

    /// Builds the alignment report from the current state.
    pub fn build_report(&self) -> Result<AlignmentReport, ReportError> {
        let catalog = match (&self.catalog, self.map_ran()) {
            (Some(c), true) => c,
            _ => return Err(ReportError::MapNotRun),
        };
        Ok(compile_report(ReportInputs {
            tree: &self.goals,
            catalog,
            state: &self.alignment,
            template_version: self.template_version.as_deref(),
            provider: self.provider.as_deref(),
            generated_at: self.last_run_at.as_deref(),
        }))
    }

    pub fn refresh_report(&mut self) {
        self.report = self.build_report().ok();
    }

    /// Checks invariants that must hold for any loaded session.
    pub fn validate(&self) -> Result<(), String> {
        if self.format != SESSION_FORMAT {
            return Err(format!("unsupported session format {}", self.format));
        }
        if !valid_session_id(&self.id) {
            return Err(format!("invalid session id {:?}", self.id));
        }
        if !self.spec.hash_matches() {
            return Err("spec document does not match its recorded hash".into());
        }
        self.goals.validate().map_err(|e| e.to_string())?;
        for (i, e) in self.transcript.iter().enumerate() {
            if e.seq as usize != i + 1 {
                return Err(format!("transcript entry {} has sequence {}", i + 1, e.seq));
            }
        }
        for (i, d) in self.decisions.iter().enumerate() {
            if d.seq as usize != i + 1 {
                return Err(format!("decision {} has sequence {}", i + 1, d.seq));
            }
        }
        Ok(())
    }
}
