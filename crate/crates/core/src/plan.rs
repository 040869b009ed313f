//! Sentence plans: ordered groups of predicates, and their bracket notation
//! (`[eatType][near customer_rating]`).

use std::collections::HashSet;
use std::fmt::Write;

use crate::data::PredicateVocab;
use crate::error::{Error, Result};

pub const DEFAULT_MAX_GROUP_SIZE: usize = 3;

/// Ordered predicate ids verbalized together in one fact.
pub type PlanGroup = Vec<usize>;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Plan {
    pub groups: Vec<PlanGroup>,
}

impl Plan {
    pub fn new(groups: Vec<PlanGroup>) -> Self {
        Plan { groups }
    }

    /// One group per predicate, in the given order.
    pub fn singletons(order: &[usize]) -> Self {
        Plan {
            groups: order.iter().map(|&p| vec![p]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn predicates(&self) -> impl Iterator<Item = usize> + '_ {
        self.groups.iter().flatten().copied()
    }

    /// Checks group sizes and that no predicate repeats anywhere in the plan.
    pub fn validate(&self, max_group_size: usize) -> Result<()> {
        let mut seen = HashSet::new();
        for g in &self.groups {
            if g.is_empty() || g.len() > max_group_size {
                return Err(Error::Plan(format!(
                    "group of {} predicates (allowed 1..={max_group_size})",
                    g.len()
                )));
            }
            for &p in g {
                if !seen.insert(p) {
                    return Err(Error::Plan(format!("predicate id {p} appears twice")));
                }
            }
        }
        Ok(())
    }

    /// Checks that the plan uses each of `predicates` exactly once and nothing else.
    pub fn check_exact_cover(&self, predicates: &[usize], max_group_size: usize) -> Result<()> {
        self.validate(max_group_size)?;
        let mine: HashSet<usize> = self.predicates().collect();
        let want: HashSet<usize> = predicates.iter().copied().collect();
        if mine != want || self.predicates().count() != predicates.len() {
            return Err(Error::Plan(
                "plan is not an exact cover of the instance predicates".into(),
            ));
        }
        Ok(())
    }

    /// Group index of each predicate (the rank used for rank correlation).
    pub fn group_of(&self, pred: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.contains(&pred))
    }
}

/// Parses `group+` where `group := '[' pred (ws pred)* ']'`. Predicate names
/// match case-insensitively; whitespace between groups is allowed.
pub fn parse_plan(text: &str, vocab: &PredicateVocab, max_group_size: usize) -> Result<Plan> {
    let mut groups = Vec::new();
    let mut rest = text.trim();
    if rest.is_empty() {
        return Err(Error::Plan("empty plan".into()));
    }
    while !rest.is_empty() {
        let Some(inner) = rest.strip_prefix('[') else {
            return Err(Error::Plan(format!("expected `[` at `{rest}`")));
        };
        let close = inner
            .find(']')
            .ok_or_else(|| Error::Plan("unbalanced brackets".into()))?;
        let body = &inner[..close];
        if body.contains('[') {
            return Err(Error::Plan("unbalanced brackets".into()));
        }
        let group = body
            .split_whitespace()
            .map(|name| {
                vocab
                    .id(name)
                    .filter(|&id| id != crate::data::START_PREDICATE)
                    .ok_or_else(|| Error::Plan(format!("unknown predicate `{name}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        groups.push(group);
        rest = inner[close + 1..].trim_start();
    }
    let plan = Plan { groups };
    plan.validate(max_group_size)?;
    Ok(plan)
}

/// Canonical notation: bracketed groups, predicates separated by one space.
pub fn format_plan(plan: &Plan, vocab: &PredicateVocab) -> String {
    let mut s = String::new();
    for g in &plan.groups {
        s.push('[');
        for (i, &p) in g.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{}", vocab.plan_name(p));
        }
        s.push(']');
    }
    s
}
