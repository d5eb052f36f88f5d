//! Two-level goal hierarchy: high-level stakeholder goals and the low-level
//! goals they decompose into, with kinds and review status.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Actor {
    pub name: String,
    pub description: String,
}

impl Actor {
    pub fn new(name: impl Into<String>) -> Self {
        Actor {
            name: name.into(),
            description: String::new(),
        }
    }
}

/// Dotted hierarchical label such as `1` or `1.2`. Ordered numerically per
/// segment, so `2` sorts before `10`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GoalId(Vec<u32>);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid goal id {0:?}")]
pub struct InvalidGoalId(pub String);

impl GoalId {
    pub fn root(index: u32) -> Self {
        GoalId(alloc::vec![index])
    }

    pub fn child(&self, index: u32) -> Self {
        let mut segments = self.0.clone();
        segments.push(index);
        GoalId(segments)
    }

    pub fn parent(&self) -> Option<GoalId> {
        (self.0.len() > 1).then(|| GoalId(self.0[..self.0.len() - 1].to_vec()))
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn last_index(&self) -> u32 {
        *self.0.last().expect("goal ids are never empty")
    }

    pub fn segments(&self) -> &[u32] {
        &self.0
    }
}

impl fmt::Display for GoalId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

impl FromStr for GoalId {
    type Err = InvalidGoalId;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || InvalidGoalId(s.to_string());
        let segments = s
            .trim()
            .split('.')
            .map(|seg| {
                if seg.is_empty() || !seg.bytes().all(|b| b.is_ascii_digit()) {
                    return Err(bad());
                }
                match seg.parse::<u32>() {
                    Ok(n) if n > 0 => Ok(n),
                    _ => Err(bad()),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(GoalId(segments))
    }
}

impl Serialize for GoalId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GoalId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoalLevel {
    High,
    Low,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalKind {
    Functional,
    NonFunctional,
    #[default]
    Unknown,
}

impl GoalKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GoalKind::Functional => "functional",
            GoalKind::NonFunctional => "non_functional",
            GoalKind::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoalStatus {
    Proposed,
    Accepted,
    Discarded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Discard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Goal {
    pub id: GoalId,
    pub name: String,
    pub description: String,
    pub level: GoalLevel,
    pub kind: GoalKind,
    pub parent: Option<GoalId>,
    pub status: GoalStatus,
    pub discard_reason: Option<String>,
    pub origin_round: u32,
}

impl Goal {
    pub fn is_discarded(&self) -> bool {
        self.status == GoalStatus::Discarded
    }
}

/// Input to [`GoalTree::ingest_goals`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoalSeed {
    pub name: String,
    pub description: String,
    pub kind: GoalKind,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GoalError {
    #[error("unknown parent goal {0}")]
    UnknownParent(GoalId),
    #[error("goal {0} is low-level and cannot be decomposed further")]
    LowLevelParent(GoalId),
    #[error("parent goal {0} is discarded")]
    ParentDiscarded(GoalId),
    #[error("unknown goal {0}")]
    UnknownGoal(GoalId),
    #[error("discarding goal {0} requires a reason")]
    MissingReason(GoalId),
    #[error("goal {0} is discarded and cannot be accepted")]
    AlreadyDiscarded(GoalId),
    #[error("goal draft {index} has an empty name")]
    EmptyName { index: usize },
    #[error("inconsistent goal tree: {0}")]
    Inconsistent(String),
}

impl GoalError {
    pub fn code(&self) -> &'static str {
        match self {
            GoalError::UnknownParent(_) => "UnknownParent",
            GoalError::LowLevelParent(_) => "LowLevelParent",
            GoalError::ParentDiscarded(_) => "ParentDiscarded",
            GoalError::UnknownGoal(_) => "UnknownGoal",
            GoalError::MissingReason(_) => "MissingReason",
            GoalError::AlreadyDiscarded(_) => "AlreadyDiscarded",
            GoalError::EmptyName { .. } => "EmptyName",
            GoalError::Inconsistent(_) => "InconsistentGoalTree",
        }
    }
}

pub const PARENT_DISCARDED: &str = "parent discarded";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GoalTreeRepr", into = "GoalTreeRepr")]
pub struct GoalTree {
    pub actor: Actor,
    goals: BTreeMap<GoalId, Goal>,
}

#[derive(Serialize, Deserialize)]
struct GoalTreeRepr {
    actor: Actor,
    goals: Vec<Goal>,
}

impl From<GoalTree> for GoalTreeRepr {
    fn from(tree: GoalTree) -> Self {
        GoalTreeRepr {
            actor: tree.actor,
            goals: tree.goals.into_values().collect(),
        }
    }
}

impl TryFrom<GoalTreeRepr> for GoalTree {
    type Error = GoalError;

    fn try_from(repr: GoalTreeRepr) -> Result<Self, Self::Error> {
        let mut goals = BTreeMap::new();
        for g in repr.goals {
            if goals.insert(g.id.clone(), g).is_some() {
                return Err(GoalError::Inconsistent("duplicate goal id".into()));
            }
        }
        let tree = GoalTree {
            actor: repr.actor,
            goals,
        };
        tree.validate()?;
        Ok(tree)
    }
}

impl GoalTree {
    pub fn new(actor: Actor) -> Self {
        GoalTree {
            actor,
            goals: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.goals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.goals.is_empty()
    }

    pub fn get(&self, id: &GoalId) -> Option<&Goal> {
        self.goals.get(id)
    }

    /// All goals in id order.
    pub fn iter(&self) -> impl Iterator<Item = &Goal> {
        self.goals.values()
    }

    pub fn high_goals(&self) -> impl Iterator<Item = &Goal> {
        self.iter().filter(|g| g.level == GoalLevel::High)
    }

    pub fn low_goals(&self) -> impl Iterator<Item = &Goal> {
        self.iter().filter(|g| g.level == GoalLevel::Low)
    }

    pub fn children<'a>(&'a self, parent: &'a GoalId) -> impl Iterator<Item = &'a Goal> + 'a {
        self.iter().filter(move |g| g.parent.as_ref() == Some(parent))
    }

    fn next_index(&self, parent: Option<&GoalId>) -> u32 {
        let max = match parent {
            None => self.high_goals().map(|g| g.id.last_index()).max(),
            Some(p) => self.children(p).map(|g| g.id.last_index()).max(),
        };
        max.unwrap_or(0) + 1
    }

    /// Appends drafts as proposed goals with the next free indices under
    /// `parent` (or at the top level). Children of a non-functional parent
    /// inherit its kind.
    pub fn ingest_goals(
        &mut self,
        parent: Option<&GoalId>,
        drafts: &[GoalSeed],
        round: u32,
    ) -> Result<Vec<GoalId>, GoalError> {
        let inherited = match parent {
            None => None,
            Some(p) => {
                let pg = self
                    .goals
                    .get(p)
                    .ok_or_else(|| GoalError::UnknownParent(p.clone()))?;
                if pg.level != GoalLevel::High {
                    return Err(GoalError::LowLevelParent(p.clone()));
                }
                if pg.is_discarded() {
                    return Err(GoalError::ParentDiscarded(p.clone()));
                }
                Some(pg.kind)
            }
        };
        if let Some(index) = drafts.iter().position(|d| d.name.trim().is_empty()) {
            return Err(GoalError::EmptyName { index });
        }

        let mut ids = Vec::with_capacity(drafts.len());
        for (next, draft) in (self.next_index(parent)..).zip(drafts) {
            let id = match parent {
                None => GoalId::root(next),
                Some(p) => p.child(next),
            };
            let kind = match inherited {
                Some(GoalKind::NonFunctional) => GoalKind::NonFunctional,
                _ => draft.kind,
            };
            self.goals.insert(
                id.clone(),
                Goal {
                    id: id.clone(),
                    name: draft.name.trim().to_string(),
                    description: draft.description.trim().to_string(),
                    level: if parent.is_some() {
                        GoalLevel::Low
                    } else {
                        GoalLevel::High
                    },
                    kind,
                    parent: parent.cloned(),
                    status: GoalStatus::Proposed,
                    discard_reason: None,
                    origin_round: round.max(1),
                },
            );
            ids.push(id);
        }
        Ok(ids)
    }

    /// Records a review decision. Discarding a high-level goal also discards
    /// its still-proposed children with reason [`PARENT_DISCARDED`].
    pub fn apply_decision(
        &mut self,
        id: &GoalId,
        decision: Decision,
        reason: Option<&str>,
    ) -> Result<(), GoalError> {
        let goal = self
            .goals
            .get_mut(id)
            .ok_or_else(|| GoalError::UnknownGoal(id.clone()))?;
        match decision {
            Decision::Accept => {
                if goal.is_discarded() {
                    return Err(GoalError::AlreadyDiscarded(id.clone()));
                }
                goal.status = GoalStatus::Accepted;
            }
            Decision::Discard => {
                let reason = reason
                    .map(str::trim)
                    .filter(|r| !r.is_empty())
                    .ok_or_else(|| GoalError::MissingReason(id.clone()))?;
                if goal.is_discarded() {
                    return Ok(());
                }
                goal.status = GoalStatus::Discarded;
                goal.discard_reason = Some(reason.to_string());
                if goal.level == GoalLevel::High {
                    for child in self.goals.values_mut() {
                        if child.parent.as_ref() == Some(id) && child.status == GoalStatus::Proposed {
                            child.status = GoalStatus::Discarded;
                            child.discard_reason = Some(PARENT_DISCARDED.to_string());
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Sets a goal's kind and pushes it down to descendants whose kind is
    /// still unknown. A non-functional verdict overrides every descendant.
    pub fn set_kind(&mut self, id: &GoalId, kind: GoalKind) -> Result<(), GoalError> {
        let goal = self
            .goals
            .get_mut(id)
            .ok_or_else(|| GoalError::UnknownGoal(id.clone()))?;
        goal.kind = kind;
        for child in self.goals.values_mut() {
            if child.parent.as_ref() == Some(id)
                && (child.kind == GoalKind::Unknown || kind == GoalKind::NonFunctional)
            {
                child.kind = kind;
            }
        }
        Ok(())
    }

    /// Low-level goals that are neither discarded nor non-functional, in id order.
    pub fn mappable_goals(&self) -> Vec<&Goal> {
        self.low_goals()
            .filter(|g| !g.is_discarded() && g.kind != GoalKind::NonFunctional)
            .collect()
    }

    /// Checks every structural invariant of the tree.
    pub fn validate(&self) -> Result<(), GoalError> {
        let bad = |msg: String| Err(GoalError::Inconsistent(msg));
        if self.actor.name.trim().is_empty() {
            return bad("actor name is empty".into());
        }
        for (id, g) in &self.goals {
            if &g.id != id {
                return bad(format!("goal keyed {id} carries id {}", g.id));
            }
            if g.name.trim().is_empty() {
                return bad(format!("goal {id} has an empty name"));
            }
            if g.origin_round == 0 {
                return bad(format!("goal {id} has origin round 0"));
            }
            if g.is_discarded() != g.discard_reason.is_some() {
                return bad(format!("goal {id}: discard reason does not match status"));
            }
            match (g.level, &g.parent, id.depth()) {
                (GoalLevel::High, None, 1) => {}
                (GoalLevel::Low, Some(p), 2) => {
                    if id.parent().as_ref() != Some(p) {
                        return bad(format!("goal {id} names parent {p}"));
                    }
                    match self.goals.get(p) {
                        Some(pg) if pg.level == GoalLevel::High => {}
                        _ => return bad(format!("goal {id}: parent {p} is not a high-level goal")),
                    }
                }
                _ => return bad(format!("goal {id}: level and parent disagree")),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn id(s: &str) -> GoalId {
        s.parse().unwrap()
    }

    fn seeds(names: &[&str]) -> Vec<GoalSeed> {
        names
            .iter()
            .map(|n| GoalSeed {
                name: n.to_string(),
                description: format!("{n} description"),
                kind: GoalKind::Unknown,
            })
            .collect()
    }

    fn tree() -> GoalTree {
        GoalTree::new(Actor::new("Owner of a GitHub account"))
    }

    #[test]
    fn goal_id_parsing_and_order() {
        assert_eq!(id("1.2").to_string(), "1.2");
        assert_eq!(id("1.2").parent(), Some(id("1")));
        assert_eq!(id("3").parent(), None);
        for bad in ["", "0", "1.", ".1", "1.0", "a", "1.-2", "+1"] {
            assert!(bad.parse::<GoalId>().is_err(), "{bad}");
        }
        let mut ids = [id("10"), id("2"), id("2.10"), id("2.9"), id("1")];
        ids.sort();
        let shown: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
        assert_eq!(shown, vec!["1", "2", "2.9", "2.10", "10"]);
    }

    #[test]
    fn ingest_six_high_level_goals() {
        let mut t = tree();
        let ids = t
            .ingest_goals(None, &seeds(&["a", "b", "c", "d", "e", "f"]), 1)
            .unwrap();
        let shown: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
        assert_eq!(shown, vec!["1", "2", "3", "4", "5", "6"]);
        assert!(t.high_goals().all(|g| g.status == GoalStatus::Proposed && g.kind == GoalKind::Unknown));
    }

    #[test]
    fn ingest_children() {
        let mut t = tree();
        t.ingest_goals(None, &seeds(&["Monitor Open Source Project Popularity"]), 1).unwrap();
        let ids = t
            .ingest_goals(
                Some(&id("1")),
                &seeds(&["Check Popularity Now", "Explore Project Popularity Over Time"]),
                1,
            )
            .unwrap();
        assert_eq!(ids, vec![id("1.1"), id("1.2")]);
        let g = t.get(&id("1.2")).unwrap();
        assert_eq!(g.level, GoalLevel::Low);
        assert_eq!(g.parent, Some(id("1")));
        // a later batch continues numbering
        let more = t.ingest_goals(Some(&id("1")), &seeds(&["x"]), 2).unwrap();
        assert_eq!(more, vec![id("1.3")]);
        assert_eq!(t.get(&id("1.3")).unwrap().origin_round, 2);
    }

    #[test]
    fn ingest_empty_batch_is_noop() {
        let mut t = tree();
        t.ingest_goals(None, &seeds(&["a"]), 1).unwrap();
        let before = t.clone();
        assert!(t.ingest_goals(None, &[], 1).unwrap().is_empty());
        assert_eq!(t, before);
    }

    #[test]
    fn ingest_errors() {
        let mut t = tree();
        assert_eq!(
            t.ingest_goals(Some(&id("1")), &seeds(&["x"]), 1),
            Err(GoalError::UnknownParent(id("1")))
        );
        t.ingest_goals(None, &seeds(&["a"]), 1).unwrap();
        t.ingest_goals(Some(&id("1")), &seeds(&["b"]), 1).unwrap();
        assert_eq!(
            t.ingest_goals(Some(&id("1.1")), &seeds(&["c"]), 1),
            Err(GoalError::LowLevelParent(id("1.1")))
        );
        assert_eq!(
            t.ingest_goals(None, &seeds(&["ok", " "]), 1),
            Err(GoalError::EmptyName { index: 1 })
        );
    }

    #[test]
    fn discard_high_goal_cascades() {
        let mut t = tree();
        t.ingest_goals(None, &seeds(&["1", "2", "3", "security"]), 1).unwrap();
        t.ingest_goals(Some(&id("4")), &seeds(&["encrypt", "access"]), 1).unwrap();
        t.apply_decision(&id("4"), Decision::Discard, Some("non-functional")).unwrap();
        for g in ["4", "4.1", "4.2"] {
            assert!(t.get(&id(g)).unwrap().is_discarded(), "{g}");
        }
        assert_eq!(t.get(&id("4.1")).unwrap().discard_reason.as_deref(), Some(PARENT_DISCARDED));
        assert_eq!(t.get(&id("4")).unwrap().discard_reason.as_deref(), Some("non-functional"));
    }

    #[test]
    fn accepted_children_survive_parent_discard() {
        let mut t = tree();
        t.ingest_goals(None, &seeds(&["a"]), 1).unwrap();
        t.ingest_goals(Some(&id("1")), &seeds(&["b", "c"]), 1).unwrap();
        t.apply_decision(&id("1.1"), Decision::Accept, None).unwrap();
        t.apply_decision(&id("1"), Decision::Discard, Some("dev perspective")).unwrap();
        assert_eq!(t.get(&id("1.1")).unwrap().status, GoalStatus::Accepted);
        assert!(t.get(&id("1.2")).unwrap().is_discarded());
    }

    #[test]
    fn accept_changes_only_target() {
        let mut t = tree();
        t.ingest_goals(None, &seeds(&["a"]), 1).unwrap();
        t.ingest_goals(Some(&id("1")), &seeds(&["b", "c"]), 1).unwrap();
        let mut expected = t.clone();
        t.apply_decision(&id("1.1"), Decision::Accept, None).unwrap();
        expected.goals.get_mut(&id("1.1")).unwrap().status = GoalStatus::Accepted;
        assert_eq!(t, expected);
    }

    #[test]
    fn decision_errors() {
        let mut t = tree();
        t.ingest_goals(None, &seeds(&["a"]), 1).unwrap();
        assert_eq!(
            t.apply_decision(&id("9.9"), Decision::Discard, Some("x")),
            Err(GoalError::UnknownGoal(id("9.9")))
        );
        assert_eq!(
            t.apply_decision(&id("1"), Decision::Discard, Some("  ")),
            Err(GoalError::MissingReason(id("1")))
        );
        t.apply_decision(&id("1"), Decision::Discard, Some("dup")).unwrap();
        assert_eq!(
            t.apply_decision(&id("1"), Decision::Accept, None),
            Err(GoalError::AlreadyDiscarded(id("1")))
        );
    }

    #[test]
    fn decisions_are_idempotent() {
        let mut t = tree();
        t.ingest_goals(None, &seeds(&["a", "b"]), 1).unwrap();
        t.ingest_goals(Some(&id("1")), &seeds(&["c"]), 1).unwrap();
        for (gid, d, r) in [
            ("1", Decision::Discard, Some("why")),
            ("2", Decision::Accept, None),
        ] {
            t.apply_decision(&id(gid), d, r).unwrap();
            let once = t.clone();
            t.apply_decision(&id(gid), d, r).unwrap();
            assert_eq!(t, once);
        }
    }

    #[test]
    fn non_functional_kind_propagates() {
        let mut t = tree();
        t.ingest_goals(None, &seeds(&["a", "b"]), 1).unwrap();
        t.set_kind(&id("2"), GoalKind::NonFunctional).unwrap();
        t.ingest_goals(Some(&id("2")), &seeds(&["x"]), 1).unwrap();
        assert_eq!(t.get(&id("2.1")).unwrap().kind, GoalKind::NonFunctional);
        t.ingest_goals(Some(&id("1")), &seeds(&["y"]), 1).unwrap();
        t.set_kind(&id("1"), GoalKind::Functional).unwrap();
        assert_eq!(t.get(&id("1.1")).unwrap().kind, GoalKind::Functional);
    }

    #[test]
    fn mappable_filter() {
        let mut t = tree();
        assert!(t.mappable_goals().is_empty());
        t.ingest_goals(None, &seeds(&["1", "2", "3", "4"]), 1).unwrap();
        assert!(t.mappable_goals().is_empty());
        t.set_kind(&id("4"), GoalKind::NonFunctional).unwrap();
        for p in ["1", "2", "3", "4"] {
            t.ingest_goals(Some(&id(p)), &seeds(&["x", "y"]), 1).unwrap();
        }
        t.apply_decision(&id("3"), Decision::Discard, Some("dev perspective")).unwrap();
        let ids: Vec<String> = t.mappable_goals().iter().map(|g| g.id.to_string()).collect();
        assert_eq!(ids, vec!["1.1", "1.2", "2.1", "2.2"]);
    }

    #[test]
    fn serde_round_trip_and_validation() {
        let mut t = tree();
        t.ingest_goals(None, &seeds(&["a"]), 1).unwrap();
        t.ingest_goals(Some(&id("1")), &seeds(&["b"]), 1).unwrap();
        let text = serde_json::to_string(&t).unwrap();
        let back: GoalTree = serde_json::from_str(&text).unwrap();
        assert_eq!(back, t);
        let orphan = text.replace("\"parent\":\"1\"", "\"parent\":\"7\"");
        assert!(serde_json::from_str::<GoalTree>(&orphan).is_err());
    }
}
