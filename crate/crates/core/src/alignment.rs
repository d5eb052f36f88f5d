//! Call plans, per-goal alignment outcomes and the alignment report.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::catalog::{EndpointCatalog, EndpointKey, ParamLocation};
use crate::goal::{GoalId, GoalKind, GoalTree};
use crate::prompt::StepDraft;

/// Where a call parameter's value comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binding {
    Literal(Value),
    /// A field of the response of an earlier step (0-based step index).
    OutputOf { step: usize, field: String },
    /// A value the actor supplies, with a short description.
    ActorInput(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallStep {
    pub endpoint: EndpointKey,
    pub bindings: BTreeMap<String, Binding>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallPlan {
    pub steps: Vec<CallStep>,
}

impl CallPlan {
    pub fn endpoints(&self) -> impl Iterator<Item = &EndpointKey> {
        self.steps.iter().map(|s| &s.endpoint)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Blocking,
    Advisory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subject {
    None,
    Goal(GoalId),
    Endpoint(EndpointKey),
}

/// A finding about a task artifact or a call plan.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub code: String,
    pub message: String,
    pub subject: Subject,
    pub severity: Severity,
}

impl Issue {
    pub fn blocking(code: &str, message: impl Into<String>, subject: Subject) -> Self {
        Issue {
            code: code.to_string(),
            message: message.into(),
            subject,
            severity: Severity::Blocking,
        }
    }

    pub fn advisory(code: &str, message: impl Into<String>, subject: Subject) -> Self {
        Issue {
            code: code.to_string(),
            message: message.into(),
            subject,
            severity: Severity::Advisory,
        }
    }

    pub fn is_blocking(&self) -> bool {
        self.severity == Severity::Blocking
    }
}

/// A plan that passed validation plus any advisory findings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidatedPlan {
    pub plan: CallPlan,
    pub advisories: Vec<Issue>,
}

/// Resolves each step against the catalog, checks `output_of` ordering and
/// binds unbound required parameters to actor input. Returns every blocking
/// issue when any step is invalid.
pub fn validate_call_plan(
    steps: &[StepDraft],
    catalog: &EndpointCatalog,
) -> Result<ValidatedPlan, Vec<Issue>> {
    let mut blocking = Vec::new();
    let mut advisories = Vec::new();
    let mut plan = Vec::with_capacity(steps.len());
    if steps.is_empty() {
        blocking.push(Issue::blocking("EmptyPlan", "call plan has no steps", Subject::None));
    }
    for (index, draft) in steps.iter().enumerate() {
        let key = EndpointKey::new(draft.verb, draft.path.clone());
        let Some(endpoint) = catalog.get(&key) else {
            blocking.push(Issue::blocking(
                "EndpointUnknown",
                format!("step {index}: endpoint {key} is not in the catalog"),
                Subject::Endpoint(key),
            ));
            continue;
        };
        let mut bindings = draft.bindings.clone();
        for (name, binding) in &draft.bindings {
            if let Binding::OutputOf { step, .. } = binding {
                if *step >= index {
                    blocking.push(Issue::blocking(
                        "ForwardReference",
                        format!("step {index}: parameter {name} reads the output of step {step}, which does not run earlier"),
                        Subject::Endpoint(key.clone()),
                    ));
                }
            }
            if endpoint.parameter(name).is_none() {
                advisories.push(Issue::advisory(
                    "UnknownParameter",
                    format!("step {index}: {key} has no parameter named {name}"),
                    Subject::Endpoint(key.clone()),
                ));
            }
        }
        for p in endpoint.parameters.iter().filter(|p| p.required) {
            if bindings.contains_key(&p.name) {
                continue;
            }
            let what = match p.location {
                ParamLocation::Body => format!("request body for {key}"),
                _ => format!("value for {} parameter {}", p.location.as_str(), p.name),
            };
            bindings.insert(p.name.clone(), Binding::ActorInput(what));
            advisories.push(Issue::advisory(
                "AutoBound",
                format!("step {index}: required parameter {} of {key} bound to actor input", p.name),
                Subject::Endpoint(key.clone()),
            ));
        }
        plan.push(CallStep {
            endpoint: key,
            bindings,
        });
    }
    if blocking.is_empty() {
        Ok(ValidatedPlan {
            plan: CallPlan { steps: plan },
            advisories,
        })
    } else {
        Err(blocking)
    }
}

/// Reason attached to goals whose Map attempts never produced a valid plan.
pub const VALIDATION_FAILED: &str = "mapping validation failed";
pub const EXCLUDED_NON_FUNCTIONAL: &str = "excluded: non-functional";
pub const NOT_MAPPED: &str = "not mapped yet";

/// The stored result of mapping one goal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingResult {
    Mapped(CallPlan),
    Unmappable {
        reason: String,
        /// True when the tool, not the model, gave up on the goal, so a
        /// later round may try again.
        reopenable: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalMapping {
    pub result: MappingResult,
    pub round: u32,
    pub advisories: Vec<Issue>,
}

/// Per-goal mapping state accumulated over rounds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentState {
    pub mappings: BTreeMap<GoalId, GoalMapping>,
}

impl AlignmentState {
    pub fn has_valid_plan(&self, id: &GoalId) -> bool {
        matches!(
            self.mappings.get(id).map(|m| &m.result),
            Some(MappingResult::Mapped(_))
        )
    }

    /// Whether the goal still needs a mapping attempt.
    pub fn needs_mapping(&self, id: &GoalId) -> bool {
        match self.mappings.get(id).map(|m| &m.result) {
            None => true,
            Some(MappingResult::Mapped(_)) => false,
            Some(MappingResult::Unmappable { reopenable, .. }) => *reopenable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Mapped(CallPlan),
    Unmappable { reason: String },
    /// Not considered for mapping: non-functional or discarded.
    Excluded { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentEntry {
    pub goal_id: GoalId,
    pub goal_name: String,
    pub outcome: Outcome,
}

/// Mapped goals over all low-level goals, excluded ones included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub numerator: u32,
    pub denominator: u32,
    pub value: f64,
}

impl Coverage {
    pub fn new(numerator: u32, denominator: u32) -> Self {
        let value = if denominator == 0 {
            0.0
        } else {
            f64::from(numerator) / f64::from(denominator)
        };
        Coverage {
            numerator,
            denominator,
            value,
        }
    }

    /// Exact rational comparison.
    pub fn same_ratio(&self, other: &Coverage) -> bool {
        u64::from(self.numerator) * u64::from(other.denominator.max(1))
            == u64::from(other.numerator) * u64::from(self.denominator.max(1))
    }
}

impl core::fmt::Display for Coverage {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}/{}", self.numerator, self.denominator)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub entries: Vec<AlignmentEntry>,
    pub coverage: Coverage,
    pub unmapped_goals: Vec<GoalId>,
    pub excluded_non_functional: Vec<GoalId>,
    pub excluded_discarded: Vec<GoalId>,
    pub unused_endpoints: Vec<EndpointKey>,
    pub template_version: Option<String>,
    pub provider: Option<String>,
    pub generated_at: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ReportError {
    #[error("the Map stage has not run for this session")]
    MapNotRun,
}

impl ReportError {
    pub fn code(&self) -> &'static str {
        "MapNotRun"
    }
}

/// Inputs of a report; [`crate::session::Session::report_inputs`] builds
/// one from session state.
#[derive(Debug, Clone, Copy)]
pub struct ReportInputs<'a> {
    pub tree: &'a GoalTree,
    pub catalog: &'a EndpointCatalog,
    pub state: &'a AlignmentState,
    pub template_version: Option<&'a str>,
    pub provider: Option<&'a str>,
    pub generated_at: Option<&'a str>,
}

/// Places every low-level goal in exactly one bucket, in id order.
pub fn compile_report(inputs: ReportInputs<'_>) -> AlignmentReport {
    let mut entries = Vec::new();
    let mut unmapped_goals = Vec::new();
    let mut excluded_non_functional = Vec::new();
    let mut excluded_discarded = Vec::new();
    let mut used = BTreeSet::new();
    let mut mapped = 0u32;

    for goal in inputs.tree.low_goals() {
        let outcome = if goal.is_discarded() {
            excluded_discarded.push(goal.id.clone());
            Outcome::Excluded {
                reason: format!(
                    "excluded: discarded ({})",
                    goal.discard_reason.as_deref().unwrap_or("no reason")
                ),
            }
        } else if goal.kind == GoalKind::NonFunctional {
            excluded_non_functional.push(goal.id.clone());
            Outcome::Excluded {
                reason: EXCLUDED_NON_FUNCTIONAL.to_string(),
            }
        } else {
            match inputs.state.mappings.get(&goal.id).map(|m| &m.result) {
                Some(MappingResult::Mapped(plan)) => {
                    mapped += 1;
                    used.extend(plan.endpoints().cloned());
                    Outcome::Mapped(plan.clone())
                }
                Some(MappingResult::Unmappable { reason, .. }) => {
                    unmapped_goals.push(goal.id.clone());
                    Outcome::Unmappable {
                        reason: reason.clone(),
                    }
                }
                None => {
                    unmapped_goals.push(goal.id.clone());
                    Outcome::Unmappable {
                        reason: NOT_MAPPED.to_string(),
                    }
                }
            }
        };
        entries.push(AlignmentEntry {
            goal_id: goal.id.clone(),
            goal_name: goal.name.clone(),
            outcome,
        });
    }

    let denominator = entries.len() as u32;
    AlignmentReport {
        entries,
        coverage: Coverage::new(mapped, denominator),
        unmapped_goals,
        excluded_non_functional,
        excluded_discarded,
        unused_endpoints: inputs.catalog.keys().filter(|k| !used.contains(k)).collect(),
        template_version: inputs.template_version.map(str::to_string),
        provider: inputs.provider.map(str::to_string),
        generated_at: inputs.generated_at.map(str::to_string),
    }
}

fn render_binding(b: &Binding) -> String {
    match b {
        Binding::Literal(v) => format!("literal {v}"),
        Binding::OutputOf { step, field } => format!("output of step {step} ({field})"),
        Binding::ActorInput(what) => format!("actor input: {what}"),
    }
}

impl AlignmentReport {
    /// Plain-text rendering with Mapped, Unmappable and API Gaps sections.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "Alignment report");
        let _ = writeln!(
            out,
            "Coverage: {} ({:.3})",
            self.coverage, self.coverage.value
        );
        if let Some(p) = &self.provider {
            let _ = writeln!(out, "Provider: {p}");
        }
        if let Some(t) = &self.template_version {
            let _ = writeln!(out, "Templates: {t}");
        }
        if let Some(t) = &self.generated_at {
            let _ = writeln!(out, "Generated: {t}");
        }

        let _ = writeln!(out, "\nMapped");
        let mut any = false;
        for e in &self.entries {
            if let Outcome::Mapped(plan) = &e.outcome {
                any = true;
                let _ = writeln!(out, "  {} {}", e.goal_id, e.goal_name);
                for (i, step) in plan.steps.iter().enumerate() {
                    let _ = writeln!(out, "    {}. {}", i + 1, step.endpoint);
                    for (name, b) in &step.bindings {
                        let _ = writeln!(out, "       {name} <- {}", render_binding(b));
                    }
                }
            }
        }
        if !any {
            let _ = writeln!(out, "  (none)");
        }

        let _ = writeln!(out, "\nUnmappable");
        any = false;
        for e in &self.entries {
            if let Outcome::Unmappable { reason } | Outcome::Excluded { reason } = &e.outcome {
                any = true;
                let _ = writeln!(out, "  {} {}: {}", e.goal_id, e.goal_name, reason);
            }
        }
        if !any {
            let _ = writeln!(out, "  (none)");
        }

        let _ = writeln!(out, "\nAPI Gaps");
        let _ = writeln!(out, "  Goals the current endpoints cannot enforce:");
        if self.unmapped_goals.is_empty() {
            let _ = writeln!(out, "    (none)");
        }
        for id in &self.unmapped_goals {
            if let Some(e) = self.entries.iter().find(|e| &e.goal_id == id) {
                let _ = writeln!(out, "    {} {}", e.goal_id, e.goal_name);
            }
        }
        let _ = writeln!(out, "  Endpoints no goal uses:");
        if self.unused_endpoints.is_empty() {
            let _ = writeln!(out, "    (none)");
        }
        for k in &self.unused_endpoints {
            let _ = writeln!(out, "    {k}");
        }
        out
    }

    pub fn mapped_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e.outcome, Outcome::Mapped(_)))
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{parse_json, Verb};
    use crate::goal::{Actor, GoalSeed};
    use alloc::vec;
    use proptest::prelude::*;
    use serde_json::json;

    fn catalog() -> EndpointCatalog {
        let doc = json!({
            "swagger": "2.0",
            "info": {"title": "t", "version": "1"},
            "paths": {
                "/projects": {"get": {"parameters": [
                    {"name": "organizations", "in": "query", "type": "string", "required": false}
                ]}},
                "/statistics/projects": {"get": {}},
                "/metrics/{name}": {"get": {"parameters": [
                    {"name": "name", "in": "path", "type": "string", "required": true}
                ]}},
                "/import": {"post": {"parameters": [
                    {"name": "data", "in": "body", "required": true, "schema": {"type": "string"}}
                ]}}
            }
        });
        parse_json("t.json", &doc.to_string()).unwrap()
    }

    fn step(verb: Verb, path: &str) -> StepDraft {
        StepDraft {
            verb,
            path: path.into(),
            bindings: BTreeMap::new(),
        }
    }

    #[test]
    fn two_step_plan_validates() {
        let v = validate_call_plan(
            &[step(Verb::Get, "/projects"), step(Verb::Get, "/statistics/projects")],
            &catalog(),
        )
        .unwrap();
        assert_eq!(v.plan.steps.len(), 2);
        assert!(v.advisories.is_empty());
    }

    #[test]
    fn unknown_endpoint_is_named() {
        let issues = validate_call_plan(&[step(Verb::Get, "/nope")], &catalog()).unwrap_err();
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].code, "EndpointUnknown");
        assert_eq!(
            issues[0].subject,
            Subject::Endpoint(EndpointKey::new(Verb::Get, "/nope"))
        );
        assert!(issues[0].message.contains("GET /nope"));
        let verb_mismatch = validate_call_plan(&[step(Verb::Delete, "/projects")], &catalog());
        assert!(verb_mismatch.is_err());
    }

    #[test]
    fn forward_reference_is_rejected() {
        let mut s1 = step(Verb::Get, "/statistics/projects");
        s1.bindings.insert(
            "x".into(),
            Binding::OutputOf {
                step: 2,
                field: "id".into(),
            },
        );
        let issues =
            validate_call_plan(&[step(Verb::Get, "/projects"), s1, step(Verb::Get, "/projects")], &catalog())
                .unwrap_err();
        assert!(issues.iter().any(|i| i.code == "ForwardReference"));
        let mut self_ref = step(Verb::Get, "/projects");
        self_ref.bindings.insert(
            "organizations".into(),
            Binding::OutputOf {
                step: 0,
                field: "x".into(),
            },
        );
        assert!(validate_call_plan(&[self_ref], &catalog()).is_err());
    }

    #[test]
    fn required_parameters_are_auto_bound() {
        let v = validate_call_plan(
            &[step(Verb::Get, "/metrics/{name}"), step(Verb::Post, "/import")],
            &catalog(),
        )
        .unwrap();
        assert!(matches!(v.plan.steps[0].bindings["name"], Binding::ActorInput(_)));
        assert!(matches!(v.plan.steps[1].bindings["data"], Binding::ActorInput(_)));
        assert_eq!(v.advisories.iter().filter(|i| i.code == "AutoBound").count(), 2);
    }

    #[test]
    fn binding_to_missing_parameter_is_advisory() {
        let mut s = step(Verb::Get, "/projects");
        s.bindings.insert("bogus".into(), Binding::Literal(json!(1)));
        let v = validate_call_plan(&[s], &catalog()).unwrap();
        assert_eq!(v.advisories[0].code, "UnknownParameter");
    }

    fn tree_with(low: &[(&str, GoalKind)]) -> GoalTree {
        let mut t = GoalTree::new(Actor::new("a"));
        let seed = |n: &str| GoalSeed {
            name: n.into(),
            description: String::new(),
            kind: GoalKind::Unknown,
        };
        t.ingest_goals(None, &[seed("h1"), seed("h2")], 1).unwrap();
        for (name, kind) in low {
            let p: GoalId = "1".parse().unwrap();
            let ids = t.ingest_goals(Some(&p), &[seed(name)], 1).unwrap();
            t.set_kind(&ids[0], *kind).unwrap();
        }
        t
    }

    fn plan(keys: &[(Verb, &str)]) -> CallPlan {
        CallPlan {
            steps: keys
                .iter()
                .map(|(v, p)| CallStep {
                    endpoint: EndpointKey::new(*v, *p),
                    bindings: BTreeMap::new(),
                })
                .collect(),
        }
    }

    fn inputs<'a>(tree: &'a GoalTree, catalog: &'a EndpointCatalog, state: &'a AlignmentState) -> ReportInputs<'a> {
        ReportInputs {
            tree,
            catalog,
            state,
            template_version: Some("v"),
            provider: Some("replay:x"),
            generated_at: None,
        }
    }

    #[test]
    fn report_buckets_and_coverage() {
        let tree = tree_with(&[
            ("a", GoalKind::Functional),
            ("b", GoalKind::Functional),
            ("c", GoalKind::NonFunctional),
            ("d", GoalKind::Unknown),
        ]);
        let catalog = catalog();
        let mut state = AlignmentState::default();
        state.mappings.insert(
            "1.1".parse().unwrap(),
            GoalMapping {
                result: MappingResult::Mapped(plan(&[(Verb::Get, "/projects")])),
                round: 1,
                advisories: vec![],
            },
        );
        state.mappings.insert(
            "1.2".parse().unwrap(),
            GoalMapping {
                result: MappingResult::Unmappable {
                    reason: "Not applicable with current set of APIs".into(),
                    reopenable: false,
                },
                round: 1,
                advisories: vec![],
            },
        );
        let r = compile_report(inputs(&tree, &catalog, &state));
        assert_eq!(r.entries.len(), 4);
        assert_eq!((r.coverage.numerator, r.coverage.denominator), (1, 4));
        assert_eq!(r.unmapped_goals, vec!["1.2".parse().unwrap(), "1.4".parse().unwrap()]);
        assert_eq!(r.excluded_non_functional, vec!["1.3".parse::<GoalId>().unwrap()]);
        assert_eq!(r.unused_endpoints.len(), catalog.len() - 1);
        let text = r.render_text();
        for section in ["\nMapped\n", "\nUnmappable\n", "\nAPI Gaps\n"] {
            assert!(text.contains(section));
        }
        assert!(text.contains("Not applicable with current set of APIs"));
        assert!(text.contains("excluded: non-functional"));
    }

    #[test]
    fn empty_tree_has_zero_coverage() {
        let tree = GoalTree::new(Actor::new("a"));
        let catalog = catalog();
        let r = compile_report(inputs(&tree, &catalog, &AlignmentState::default()));
        assert!(r.entries.is_empty());
        assert_eq!(r.coverage.value, 0.0);
        assert_eq!(r.unused_endpoints.len(), 4);
    }

    #[test]
    fn coverage_ratio_equality_is_exact() {
        assert!(Coverage::new(7, 12).same_ratio(&Coverage::new(14, 24)));
        assert!(!Coverage::new(7, 12).same_ratio(&Coverage::new(8, 12)));
        assert!(Coverage::new(0, 0).same_ratio(&Coverage::new(0, 5)));
    }

    #[test]
    fn state_tracks_reopenable_goals() {
        let mut s = AlignmentState::default();
        let id: GoalId = "1.1".parse().unwrap();
        assert!(s.needs_mapping(&id));
        s.mappings.insert(
            id.clone(),
            GoalMapping {
                result: MappingResult::Unmappable {
                    reason: VALIDATION_FAILED.into(),
                    reopenable: true,
                },
                round: 1,
                advisories: vec![],
            },
        );
        assert!(s.needs_mapping(&id));
        s.mappings.get_mut(&id).unwrap().result = MappingResult::Unmappable {
            reason: "model says no".into(),
            reopenable: false,
        };
        assert!(!s.needs_mapping(&id));
    }

    proptest! {
        #[test]
        fn plan_validation_is_catalog_membership(picks in proptest::collection::vec((0usize..6, any::<bool>()), 1..6)) {
            let catalog = catalog();
            let candidates = [
                (Verb::Get, "/projects"), (Verb::Get, "/statistics/projects"), (Verb::Get, "/metrics/{name}"),
                (Verb::Post, "/import"), (Verb::Get, "/foo"), (Verb::Put, "/projects"),
            ];
            let steps: Vec<StepDraft> = picks.iter().map(|(i, _)| step(candidates[*i].0, candidates[*i].1)).collect();
            let all_known = steps.iter().all(|s| catalog.lookup(s.verb, &s.path).is_some());
            match validate_call_plan(&steps, &catalog) {
                Ok(v) => {
                    prop_assert!(all_known);
                    prop_assert!(v.plan.endpoints().all(|k| catalog.contains(k)));
                }
                Err(issues) => {
                    prop_assert!(!all_known);
                    prop_assert!(issues.iter().all(|i| i.code == "EndpointUnknown"));
                }
            }
        }
    }
}
