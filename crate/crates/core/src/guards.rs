//! Causal guard learning.
//!
//! For every source mode `A` the sample space is the set of steps where `A`
//! is active. A transition event `A => B` happens on the last step of an
//! `A` occurrence that is immediately followed by `B`. Each predicate is
//! scored against each event with normalized pointwise mutual information;
//! predicates at or above the universal threshold become conjuncts, those
//! between the relevant and universal thresholds become disjuncts, and any
//! exogenous explanation suppresses all endogenous ones.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{FitConfig, TemplateSet};
use crate::segmentation::ModeSet;
use crate::trace::{PredicateKind, Trace};

pub const DEFAULT_THETA_UNIVERSAL: f64 = 0.9;
pub const DEFAULT_THETA_RELEVANT: f64 = 0.4;
/// Tolerance of the mode-relative velocity-extremum predicate.
pub const DEFAULT_EPS_EXT: f64 = 0.25;

#[derive(Debug, Error)]
pub enum GuardError {
    #[error("invalid counts: xy={xy} x={x} y={y} total={total}")]
    InvalidCounts { xy: usize, x: usize, y: usize, total: usize },
    #[error("thresholds must satisfy 0 < relevant <= universal <= 1 (got relevant={relevant}, universal={universal})")]
    BadThresholds { relevant: f64, universal: f64 },
    #[error("assignment covers {got} steps but the trace has {expected}")]
    AssignmentLength { got: usize, expected: usize },
    #[error(transparent)]
    Trace(#[from] crate::trace::TraceError),
}

/// Normalized pointwise mutual information of two events from counts.
///
/// `-1` when the events never co-occur, `+1` when they always co-occur and
/// `0` when either event has no support.
pub fn npmi(count_xy: usize, count_x: usize, count_y: usize, total: usize) -> Result<f64, GuardError> {
    if total == 0 || count_x > total || count_y > total || count_xy > count_x.min(count_y) {
        return Err(GuardError::InvalidCounts {
            xy: count_xy,
            x: count_x,
            y: count_y,
            total,
        });
    }
    if count_x == 0 || count_y == 0 {
        return Ok(0.0);
    }
    if count_xy == 0 {
        return Ok(-1.0);
    }
    if count_xy == count_x && count_xy == count_y {
        return Ok(1.0);
    }
    let t = total as f64;
    let pxy = count_xy as f64 / t;
    let px = count_x as f64 / t;
    let py = count_y as f64 / t;
    let value = (pxy / (px * py)).ln() / -pxy.ln();
    Ok(value.clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuardConfig {
    pub theta_universal: f64,
    pub theta_relevant: f64,
    /// Co-occurrence half-width in steps around the transition step.
    pub window: usize,
    pub eps_ext: f64,
}

impl Default for GuardConfig {
    fn default() -> Self {
        Self {
            theta_universal: DEFAULT_THETA_UNIVERSAL,
            theta_relevant: DEFAULT_THETA_RELEVANT,
            window: 0,
            eps_ext: DEFAULT_EPS_EXT,
        }
    }
}

impl GuardConfig {
    pub fn validate(&self) -> Result<(), GuardError> {
        let ok = self.theta_relevant > 0.0
            && self.theta_relevant <= self.theta_universal
            && self.theta_universal <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(GuardError::BadThresholds {
                relevant: self.theta_relevant,
                universal: self.theta_universal,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionEvent {
    pub source: usize,
    pub target: usize,
    /// Last step of the source occurrence.
    pub step: usize,
}

/// A predicate column as seen by guard learning.
#[derive(Debug, Clone, PartialEq)]
pub struct PredicateColumn {
    pub name: String,
    pub kind: PredicateKind,
    pub values: Vec<bool>,
}

/// Counts for one source mode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SourceCounts {
    /// Steps where the source is active.
    pub total: usize,
    /// Per predicate (same order as [`EventTables::predicates`]).
    pub predicate: Vec<usize>,
    /// Per target: number of events.
    pub events: BTreeMap<usize, usize>,
    /// Per target: per-predicate joint counts.
    pub joint: BTreeMap<usize, Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventTables {
    pub predicates: Vec<(String, PredicateKind)>,
    pub sources: BTreeMap<usize, SourceCounts>,
}

/// Names of the mode-relative extremum predicates for `signal`.
pub fn extremum_names(signal: &str) -> (String, String) {
    (format!("{signal}_ext_max"), format!("{signal}_ext_min"))
}

/// Per-mode `(min, max)` of `signal`.
pub fn mode_extrema(modes: &ModeSet, values: &[f64]) -> Vec<(f64, f64)> {
    modes
        .modes
        .iter()
        .map(|m| {
            m.occurrences
                .iter()
                .flat_map(|&(s, e)| values[s..e].iter().copied())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        })
        .collect()
}

/// The predicate columns used for guard learning: every trace predicate
/// plus, when `signal` is given, the mode-relative extremum predicates.
pub fn predicate_columns(
    modes: &ModeSet,
    trace: &Trace,
    signal: Option<&str>,
    cfg: &GuardConfig,
) -> Result<Vec<PredicateColumn>, GuardError> {
    let mut cols: Vec<PredicateColumn> = trace
        .predicates()
        .iter()
        .map(|(name, p)| PredicateColumn {
            name: name.clone(),
            kind: p.kind,
            values: p.values.clone(),
        })
        .collect();
    if let Some(sig) = signal {
        let v = trace.signal(sig)?;
        let ext = mode_extrema(modes, v);
        let (max_name, min_name) = extremum_names(sig);
        let mut at_max = vec![false; v.len()];
        let mut at_min = vec![false; v.len()];
        for (t, &m) in modes.assignment.iter().enumerate() {
            let (lo, hi) = ext[m];
            at_max[t] = (v[t] - hi).abs() <= cfg.eps_ext;
            at_min[t] = (v[t] - lo).abs() <= cfg.eps_ext;
        }
        cols.push(PredicateColumn {
            name: max_name,
            kind: PredicateKind::Endogenous,
            values: at_max,
        });
        cols.push(PredicateColumn {
            name: min_name,
            kind: PredicateKind::Endogenous,
            values: at_min,
        });
    }
    if cfg.window > 0 {
        for col in &mut cols {
            col.values = widen(&col.values, cfg.window);
        }
    }
    Ok(cols)
}

fn widen(values: &[bool], w: usize) -> Vec<bool> {
    let n = values.len();
    (0..n)
        .map(|t| values[t.saturating_sub(w)..(t + w + 1).min(n)].iter().any(|&b| b))
        .collect()
}

/// Transition events between consecutive occurrences of distinct modes.
pub fn transition_events(modes: &ModeSet) -> Vec<TransitionEvent> {
    let timeline = modes.timeline();
    timeline
        .windows(2)
        .filter(|w| w[0].2 != w[1].2 && w[0].1 == w[1].0)
        .map(|w| TransitionEvent {
            source: w[0].2,
            target: w[1].2,
            step: w[0].1 - 1,
        })
        .collect()
}

/// Builds the per-source count tables.
pub fn extract_events(
    modes: &ModeSet,
    trace: &Trace,
    signal: Option<&str>,
    cfg: &GuardConfig,
) -> Result<(Vec<TransitionEvent>, EventTables), GuardError> {
    if modes.assignment.len() != trace.len() {
        return Err(GuardError::AssignmentLength {
            got: modes.assignment.len(),
            expected: trace.len(),
        });
    }
    let cols = predicate_columns(modes, trace, signal, cfg)?;
    let events = transition_events(modes);
    let p = cols.len();
    let mut sources: BTreeMap<usize, SourceCounts> = BTreeMap::new();
    for (t, &m) in modes.assignment.iter().enumerate() {
        let entry = sources.entry(m).or_insert_with(|| SourceCounts {
            predicate: vec![0; p],
            ..Default::default()
        });
        entry.total += 1;
        for (c, col) in cols.iter().enumerate() {
            if col.values[t] {
                entry.predicate[c] += 1;
            }
        }
    }
    for ev in &events {
        let entry = sources.get_mut(&ev.source).expect("source is active somewhere");
        *entry.events.entry(ev.target).or_insert(0) += 1;
        let joint = entry.joint.entry(ev.target).or_insert_with(|| vec![0; p]);
        for (c, col) in cols.iter().enumerate() {
            if col.values[ev.step] {
                joint[c] += 1;
            }
        }
    }
    let predicates = cols.into_iter().map(|c| (c.name, c.kind)).collect();
    Ok((events, EventTables { predicates, sources }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuardClass {
    Universal,
    Relevant,
    /// Passed a threshold but dropped in favour of an exogenous explanation.
    Suppressed,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardTerm {
    pub predicate: String,
    pub kind: PredicateKind,
    pub npmi: f64,
    pub class: GuardClass,
}

/// `c1 && ... && ci && (d1 || ... || dj)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Guard {
    pub conjuncts: BTreeSet<String>,
    pub disjuncts: BTreeSet<String>,
    /// Every scored predicate, highest NPMI first.
    pub provenance: Vec<GuardTerm>,
    /// Number of observed events.
    pub events: usize,
}

impl Guard {
    pub fn is_unexplained(&self) -> bool {
        self.conjuncts.is_empty() && self.disjuncts.is_empty()
    }

    pub fn term(&self, predicate: &str) -> Option<&GuardTerm> {
        self.provenance.iter().find(|t| t.predicate == predicate)
    }
}

pub type GuardMap = BTreeMap<(usize, usize), Guard>;

/// Thresholds the NPMI table of every transition into a guard.
pub fn learn_guards(tables: &EventTables, cfg: &GuardConfig) -> Result<GuardMap, GuardError> {
    cfg.validate()?;
    let mut out = GuardMap::new();
    for (&source, counts) in &tables.sources {
        for (&target, &n_events) in &counts.events {
            let joint = &counts.joint[&target];
            let mut terms = Vec::with_capacity(tables.predicates.len());
            for (c, (name, kind)) in tables.predicates.iter().enumerate() {
                let score = npmi(joint[c], counts.predicate[c], n_events, counts.total)?;
                terms.push(GuardTerm {
                    predicate: name.clone(),
                    kind: *kind,
                    npmi: score,
                    class: classify(score, cfg),
                });
            }
            out.insert((source, target), build_guard(terms, n_events));
        }
    }
    Ok(out)
}

fn classify(score: f64, cfg: &GuardConfig) -> GuardClass {
    if score >= cfg.theta_universal {
        GuardClass::Universal
    } else if score >= cfg.theta_relevant {
        GuardClass::Relevant
    } else {
        GuardClass::None
    }
}

/// Applies exogenous priority and splits terms into conjuncts and disjuncts.
pub fn build_guard(mut terms: Vec<GuardTerm>, events: usize) -> Guard {
    let exogenous_explains = terms
        .iter()
        .any(|t| t.kind == PredicateKind::Exogenous && t.class != GuardClass::None);
    if exogenous_explains {
        for t in terms.iter_mut() {
            if t.kind == PredicateKind::Endogenous && t.class != GuardClass::None {
                t.class = GuardClass::Suppressed;
            }
        }
    }
    terms.sort_by(|a, b| b.npmi.total_cmp(&a.npmi).then_with(|| a.predicate.cmp(&b.predicate)));
    let pick = |class| {
        terms
            .iter()
            .filter(|t| t.class == class)
            .map(|t| t.predicate.clone())
            .collect::<BTreeSet<_>>()
    };
    Guard {
        conjuncts: pick(GuardClass::Universal),
        disjuncts: pick(GuardClass::Relevant),
        provenance: terms,
        events,
    }
}

/// Modes plus learned guards, before assembly.
#[derive(Debug, Clone, PartialEq)]
pub struct AutomatonDraft {
    pub modes: ModeSet,
    pub guards: GuardMap,
}

/// Everything needed to recompute guards after a target merge.
#[derive(Debug, Clone, Copy)]
pub struct GuardContext<'a> {
    pub trace: &'a Trace,
    pub signal: Option<&'a str>,
    pub templates: &'a TemplateSet,
    pub fit: &'a FitConfig,
    pub guard: &'a GuardConfig,
}

impl GuardContext<'_> {
    pub fn learn(&self, modes: ModeSet) -> Result<AutomatonDraft, GuardError> {
        let (_, tables) = extract_events(&modes, self.trace, self.signal, self.guard)?;
        let guards = learn_guards(&tables, self.guard)?;
        Ok(AutomatonDraft { modes, guards })
    }
}

/// `true` when two conjunct sets can fire together: equal, or one
/// contained in the other. Empty sets never conflict.
pub fn conflicting(a: &BTreeSet<String>, b: &BTreeSet<String>) -> bool {
    !a.is_empty() && !b.is_empty() && (a.is_subset(b) || b.is_subset(a))
}

/// Two out-guards of one source are non-deterministic when their conjunct
/// sets conflict, or when they are identical (same conjuncts and same
/// disjuncts) and not unexplained.
pub fn guards_conflict(a: &Guard, b: &Guard) -> bool {
    conflicting(&a.conjuncts, &b.conjuncts)
        || (!a.is_unexplained() && a.conjuncts == b.conjuncts && a.disjuncts == b.disjuncts)
}

/// First conflicting out-transition pair in `(source, target1, target2)` order.
pub fn find_conflict(guards: &GuardMap) -> Option<(usize, usize, usize)> {
    let mut by_source: BTreeMap<usize, Vec<(usize, &Guard)>> = BTreeMap::new();
    for (&(s, t), g) in guards {
        by_source.entry(s).or_default().push((t, g));
    }
    for (s, outs) in by_source {
        for (i, (t1, g1)) in outs.iter().enumerate() {
            for (t2, g2) in &outs[i + 1..] {
                if guards_conflict(g1, g2) {
                    return Some((s, *t1, *t2));
                }
            }
        }
    }
    None
}

/// Merges target modes of non-deterministic out-transitions, one pair at a
/// time, relearning guards after each merge until no conflict remains.
/// Returns the resolved draft and the merged `(target1, target2)` pairs.
pub fn resolve_nondeterminism(
    mut draft: AutomatonDraft,
    ctx: &GuardContext<'_>,
) -> Result<(AutomatonDraft, Vec<(usize, usize)>), GuardError> {
    let mut merged = Vec::new();
    while let Some((_, t1, t2)) = find_conflict(&draft.guards) {
        let Some(modes) = draft.modes.merge_pair(t1, t2, ctx.templates, ctx.fit) else {
            break;
        };
        merged.push((t1, t2));
        draft = ctx.learn(modes)?;
    }
    Ok((draft, merged))
}

/// One block per transition with its scored predicates.
pub fn guard_report(guards: &GuardMap, names: &[String]) -> String {
    let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("m{i}"));
    let mut out = String::new();
    let _ = writeln!(out, "# guards transitions={}", guards.len());
    for (&(s, t), g) in guards {
        let status = if !g.conjuncts.is_empty() {
            "explained"
        } else if !g.disjuncts.is_empty() {
            "relevant-only"
        } else {
            "unexplained"
        };
        let _ = writeln!(
            out,
            "transition source={} target={} events={} status={status}",
            name(s),
            name(t),
            g.events
        );
        for term in g.provenance.iter().filter(|t| t.npmi > 0.0) {
            let class = match term.class {
                GuardClass::Universal => "universal",
                GuardClass::Relevant => "relevant",
                GuardClass::Suppressed => "suppressed",
                GuardClass::None => "none",
            };
            let _ = writeln!(
                out,
                "  predicate={} kind={} npmi={:.4} class={class}",
                term.predicate,
                term.kind.tag(),
                term.npmi
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn npmi_endpoints() {
        assert!(npmi(25, 50, 50, 100).unwrap().abs() < 1e-15);
        assert_eq!(npmi(10, 10, 10, 100).unwrap(), 1.0);
        assert_eq!(npmi(0, 30, 30, 100).unwrap(), -1.0);
        assert_eq!(npmi(0, 0, 30, 100).unwrap(), 0.0);
        assert_eq!(npmi(5, 5, 5, 5).unwrap(), 1.0);
        assert!(npmi(11, 10, 20, 100).is_err());
        assert!(npmi(0, 0, 0, 0).is_err());
        assert!(npmi(1, 101, 20, 100).is_err());
    }

    fn term(name: &str, kind: PredicateKind, score: f64) -> GuardTerm {
        GuardTerm {
            predicate: name.into(),
            kind,
            npmi: score,
            class: classify(score, &GuardConfig::default()),
        }
    }

    #[test]
    fn exogenous_priority() {
        let g = build_guard(
            vec![
                term("q", PredicateKind::Endogenous, 0.95),
                term("p", PredicateKind::Exogenous, 0.95),
            ],
            3,
        );
        assert_eq!(g.conjuncts, BTreeSet::from(["p".to_string()]));
        assert!(g.disjuncts.is_empty());
        assert_eq!(g.term("q").unwrap().class, GuardClass::Suppressed);
    }

    #[test]
    fn relevant_exogenous_still_suppresses_endogenous() {
        let g = build_guard(
            vec![
                term("q", PredicateKind::Endogenous, 0.97),
                term("p", PredicateKind::Exogenous, 0.5),
            ],
            3,
        );
        assert!(g.conjuncts.is_empty());
        assert_eq!(g.disjuncts, BTreeSet::from(["p".to_string()]));
    }

    #[test]
    fn below_relevant_is_unexplained() {
        let g = build_guard(vec![term("p", PredicateKind::Exogenous, 0.39)], 1);
        assert!(g.is_unexplained());
    }

    #[test]
    fn endogenous_only_guard() {
        let g = build_guard(
            vec![
                term("vy_zc_down", PredicateKind::Endogenous, 0.92),
                term("vy_sign_neg", PredicateKind::Endogenous, 0.5),
                term("btn", PredicateKind::Exogenous, 0.1),
            ],
            4,
        );
        assert_eq!(g.conjuncts, BTreeSet::from(["vy_zc_down".to_string()]));
        assert_eq!(g.disjuncts, BTreeSet::from(["vy_sign_neg".to_string()]));
        assert_eq!(g.provenance[0].predicate, "vy_zc_down");
    }

    #[test]
    fn conflicts() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>();
        assert!(conflicting(&s(&["p"]), &s(&["p"])));
        assert!(conflicting(&s(&["p"]), &s(&["p", "q"])));
        assert!(!conflicting(&s(&["p"]), &s(&["q"])));
        assert!(!conflicting(&s(&[]), &s(&["q"])));
    }

    #[test]
    fn threshold_validation() {
        let bad = GuardConfig {
            theta_universal: 0.3,
            theta_relevant: 0.4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(GuardConfig::default().validate().is_ok());
    }

    #[test]
    fn widen_window() {
        assert_eq!(widen(&[false, false, true, false, false], 1), vec![false, true, true, true, false]);
    }
}
