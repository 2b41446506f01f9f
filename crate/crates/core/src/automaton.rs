//! Learned hybrid automata: assembly from modes and guards, forward
//! simulation, scoring against ground truth, and export.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;

use indexmap::IndexMap;
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::guards::{mode_extrema, Guard, GuardMap};
use crate::models::{Basis, Interval, ResetSemantics};
use crate::segmentation::ModeSet;
use crate::trace::{dead_band_sign, Trace, EPS_SIGN};

/// Version tag of the structured automaton format.
pub const FORMAT_TAG: &str = "charda-ha/1";

const CONFIDENCE: f64 = 0.95;

#[derive(Debug, Error)]
pub enum AutomatonError {
    #[error("unknown mode '{0}'")]
    UnknownMode(String),
    #[error("guard predicate '{0}' is neither provided nor computable")]
    UnknownPredicate(String),
    #[error("ambiguous transitions at step {step}: {edges}")]
    Ambiguous { step: usize, edges: String },
    #[error("label sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("predicate '{0}' has {1} step(s), simulation needs {2}")]
    ShortPredicate(String, usize, usize),
    #[error("unsupported format tag '{0}'")]
    BadFormat(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Trace(#[from] crate::trace::TraceError),
}

/// Continuous behaviour inside a mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flow {
    /// `dv = c`: the signal holds a constant value.
    Velocity(Interval),
    /// `ddv = a` per unit time.
    Acceleration(Interval),
}

/// Assignment applied to the signal on mode entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Update {
    /// Keep the incoming value (flow applies from the entry step).
    None,
    /// `v := value`.
    Set(Interval),
    /// `v := min(v, max)`.
    ClampMax(f64),
    /// `v := base + v - floor(v)`.
    FractionalOffset(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    pub name: String,
    pub flow: Flow,
    pub update: Update,
    pub update_semantics: ResetSemantics,
    /// Observed `(min, max)` of the signal, used by extremum predicates.
    pub extremum: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub source: String,
    pub target: String,
    pub guard: Guard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridAutomaton {
    pub format: String,
    /// Name of the modeled signal.
    pub signal: String,
    pub dt: f64,
    pub modes: Vec<ModeSpec>,
    pub transitions: Vec<Transition>,
    pub initial: String,
}

impl HybridAutomaton {
    pub fn mode_index(&self, name: &str) -> Result<usize, AutomatonError> {
        self.modes
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| AutomatonError::UnknownMode(name.to_string()))
    }

    pub fn mode(&self, name: &str) -> Result<&ModeSpec, AutomatonError> {
        Ok(&self.modes[self.mode_index(name)?])
    }

    /// Checks that every transition names existing modes.
    pub fn validate(&self) -> Result<(), AutomatonError> {
        if self.format != FORMAT_TAG {
            return Err(AutomatonError::BadFormat(self.format.clone()));
        }
        self.mode_index(&self.initial)?;
        for t in &self.transitions {
            self.mode_index(&t.source)?;
            self.mode_index(&t.target)?;
        }
        Ok(())
    }
}

/// Default mode name for index `i`.
pub fn mode_name(i: usize) -> String {
    format!("m{i}")
}

/// Builds the automaton from merged modes and their guards.
pub fn assemble(modes: &ModeSet, guards: &GuardMap, trace: &Trace, signal: &str) -> Result<HybridAutomaton, AutomatonError> {
    let values = trace.signal(signal)?;
    let dt = trace.dt();
    let extrema = mode_extrema(modes, values);
    let specs = modes
        .modes
        .iter()
        .enumerate()
        .map(|(idx, m)| {
            let model = &m.model;
            let ci = model.confidence_intervals(CONFIDENCE);
            let (flow, update, semantics) = match model.template.basis {
                Basis::Constant => (Flow::Velocity(ci[0]), Update::None, ResetSemantics::Continuous),
                Basis::Linear => {
                    let accel = Interval::new(ci[1].lo / dt, ci[1].hi / dt);
                    let incoming: Vec<f64> = m
                        .occurrences
                        .iter()
                        .filter(|&&(s, _)| s > 0)
                        .map(|&(s, _)| values[s - 1])
                        .collect();
                    let excludes = incoming.is_empty() || {
                        let mean = incoming.iter().sum::<f64>() / incoming.len() as f64;
                        !ci[0].contains(mean)
                    };
                    if excludes {
                        (Flow::Acceleration(accel), Update::Set(ci[0]), ResetSemantics::Reset)
                    } else {
                        (Flow::Acceleration(accel), Update::None, ResetSemantics::Continuous)
                    }
                }
            };
            ModeSpec {
                name: mode_name(idx),
                flow,
                update,
                update_semantics: semantics,
                extremum: Some(extrema[idx]),
            }
        })
        .collect();
    let transitions = guards
        .iter()
        .map(|(&(s, t), g)| Transition {
            source: mode_name(s),
            target: mode_name(t),
            guard: g.clone(),
        })
        .collect();
    let initial = mode_name(modes.assignment.first().copied().unwrap_or(0));
    Ok(HybridAutomaton {
        format: FORMAT_TAG.to_string(),
        signal: signal.to_string(),
        dt,
        modes: specs,
        transitions,
        initial,
    })
}

/// Initial mode and signal value for simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub mode: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub values: Vec<f64>,
    /// Mode index per step.
    pub modes: Vec<usize>,
}

impl Simulation {
    pub fn mode_names<'a>(&self, ha: &'a HybridAutomaton) -> Vec<&'a str> {
        self.modes.iter().map(|&m| ha.modes[m].name.as_str()).collect()
    }

    /// The simulated signal as a trace with the same timestep.
    pub fn to_trace(&self, ha: &HybridAutomaton) -> Result<Trace, AutomatonError> {
        Ok(Trace::new(ha.dt, self.values.len())?.with_signal(ha.signal.clone(), self.values.clone())?)
    }
}

fn step_flow(flow: &Flow, v: f64, dt: f64) -> f64 {
    match flow {
        Flow::Velocity(c) => c.mid(),
        Flow::Acceleration(a) => v + a.mid() * dt,
    }
}

fn entry_value(mode: &ModeSpec, v: f64, dt: f64) -> f64 {
    match &mode.update {
        Update::None => step_flow(&mode.flow, v, dt),
        Update::Set(x) => x.mid(),
        Update::ClampMax(m) => step_flow(&mode.flow, v, dt).min(*m),
        Update::FractionalOffset(base) => base + v - v.floor(),
    }
}

/// Evaluates predicates on the simulated signal at a given step.
struct PredicateEnv<'a> {
    exogenous: &'a IndexMap<String, Vec<bool>>,
    signal: &'a str,
    dt: f64,
}

impl PredicateEnv<'_> {
    fn holds(&self, name: &str, step: usize, values: &[f64], extremum: Option<(f64, f64)>, eps_ext: f64) -> bool {
        if let Some(col) = self.exogenous.get(name) {
            return col[step];
        }
        let v = values[step];
        let prev = step.checked_sub(1).map(|p| values[p]);
        let acc = prev.map(|p| (v - p) / self.dt).unwrap_or(0.0);
        let suffix = name
            .strip_prefix(self.signal)
            .and_then(|s| s.strip_prefix('_'))
            .unwrap_or("");
        match suffix {
            "zc_down" => prev.is_some_and(|p| p > EPS_SIGN && v <= EPS_SIGN),
            "zc_up" => prev.is_some_and(|p| p < -EPS_SIGN && v >= -EPS_SIGN),
            "sign_neg" => dead_band_sign(v, EPS_SIGN) == -1,
            // A simulated value rarely lands on zero exactly; the sample
            // nearest a crossing stands in for it.
            "sign_zero" => v.abs() <= prev.map_or(EPS_SIGN, |p| EPS_SIGN.max((v - p).abs() / 2.0)),
            "sign_pos" => dead_band_sign(v, EPS_SIGN) == 1,
            "acc_neg" => dead_band_sign(acc, EPS_SIGN) == -1,
            "acc_zero" => dead_band_sign(acc, EPS_SIGN) == 0,
            "acc_pos" => dead_band_sign(acc, EPS_SIGN) == 1,
            "ext_max" => extremum.is_some_and(|(_, hi)| (v - hi).abs() <= eps_ext),
            "ext_min" => extremum.is_some_and(|(lo, _)| (v - lo).abs() <= eps_ext),
            _ => false,
        }
    }

    fn known(&self, name: &str) -> bool {
        if self.exogenous.contains_key(name) {
            return true;
        }
        const SUFFIXES: [&str; 10] = [
            "zc_down", "zc_up", "sign_neg", "sign_zero", "sign_pos", "acc_neg", "acc_zero", "acc_pos", "ext_max",
            "ext_min",
        ];
        name.strip_prefix(self.signal)
            .and_then(|s| s.strip_prefix('_'))
            .is_some_and(|s| SUFFIXES.contains(&s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub eps_ext: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            eps_ext: crate::guards::DEFAULT_EPS_EXT,
        }
    }
}

#[derive(Clone)]
struct SimEdge<'a> {
    target: usize,
    terms: Vec<&'a str>,
    /// Guard without conjuncts; `terms` are its disjuncts.
    fallback: bool,
    /// 0 exogenous conjunct, 1 endogenous conjuncts only, 2 disjuncts only.
    rank: u8,
    events: usize,
}

/// Runs the automaton for `steps` steps.
///
/// A transition's guard is evaluated on the last step of the current mode
/// (step `k - 1`); when exactly one edge becomes enabled there (its
/// conjuncts all hold at `k - 1` but not at `k - 2`), the target mode starts
/// at step `k` with its update applied. A guard without conjuncts becomes
/// enabled when its disjunction turns true.
///
/// Enabled edges are ranked by cause: a guard with an exogenous conjunct
/// beats one on the signal alone, which beats a disjunction-only guard.
/// Two exogenous edges at once are ambiguous; lower ranks break ties by
/// the number of witnessed events, then by target index.
pub fn simulate(
    ha: &HybridAutomaton,
    exogenous: &IndexMap<String, Vec<bool>>,
    steps: usize,
    initial: &SimState,
    cfg: &SimConfig,
) -> Result<Simulation, AutomatonError> {
    ha.validate()?;
    let env = PredicateEnv {
        exogenous,
        signal: &ha.signal,
        dt: ha.dt,
    };
    let mut out_edges: Vec<Vec<SimEdge>> = vec![Vec::new(); ha.modes.len()];
    for t in &ha.transitions {
        let g = &t.guard;
        if g.is_unexplained() {
            continue;
        }
        for p in g.conjuncts.iter().chain(&g.disjuncts) {
            if !env.known(p) {
                return Err(AutomatonError::UnknownPredicate(p.clone()));
            }
        }
        let fallback = g.conjuncts.is_empty();
        let terms = if fallback { &g.disjuncts } else { &g.conjuncts };
        let rank = if fallback {
            2
        } else if g.conjuncts.iter().any(|p| exogenous.contains_key(p)) {
            0
        } else {
            1
        };
        out_edges[ha.mode_index(&t.source)?].push(SimEdge {
            target: ha.mode_index(&t.target)?,
            terms: terms.iter().map(String::as_str).collect(),
            fallback,
            rank,
            events: g.events,
        });
    }
    for (name, col) in exogenous {
        if col.len() < steps {
            return Err(AutomatonError::ShortPredicate(name.clone(), col.len(), steps));
        }
    }
    let mut values = Vec::with_capacity(steps);
    let mut modes = Vec::with_capacity(steps);
    if steps == 0 {
        return Ok(Simulation { values, modes });
    }
    let mut mode = ha.mode_index(&initial.mode)?;
    values.push(initial.value);
    modes.push(mode);
    for k in 1..steps {
        let ext = ha.modes[mode].extremum;
        let holds_at = |e: &SimEdge, step: usize| {
            let mut it = e.terms.iter().map(|p| env.holds(p, step, &values, ext, cfg.eps_ext));
            if e.fallback {
                it.any(|b| b)
            } else {
                it.all(|b| b)
            }
        };
        let enabled: Vec<&SimEdge> = out_edges[mode]
            .iter()
            .filter(|e| holds_at(e, k - 1) && !(k >= 2 && holds_at(e, k - 2)))
            .collect();
        let top = enabled.iter().map(|e| e.rank).min();
        let firing: Vec<usize> = match top {
            None => Vec::new(),
            Some(0) => enabled.iter().filter(|e| e.rank == 0).map(|e| e.target).collect(),
            Some(r) => enabled
                .iter()
                .filter(|e| e.rank == r)
                .min_by_key(|e| (std::cmp::Reverse(e.events), e.target))
                .map(|e| e.target)
                .into_iter()
                .collect(),
        };
        let prev = values[k - 1];
        let v = match firing.as_slice() {
            [] => step_flow(&ha.modes[mode].flow, prev, ha.dt),
            [target] => {
                mode = *target;
                entry_value(&ha.modes[mode], prev, ha.dt)
            }
            many => {
                let edges: Vec<String> = many
                    .iter()
                    .map(|&t| format!("{} -> {}", ha.modes[mode].name, ha.modes[t].name))
                    .collect();
                return Err(AutomatonError::Ambiguous {
                    step: k - 1,
                    edges: edges.join(", "),
                });
            }
        };
        values.push(v);
        modes.push(mode);
    }
    Ok(Simulation { values, modes })
}

/// Exogenous predicate columns of a trace, by name.
pub fn exogenous_stream(trace: &Trace) -> IndexMap<String, Vec<bool>> {
    trace.exogenous().map(|(n, v)| (n.to_string(), v.to_vec())).collect()
}

/// Mean absolute error between two equally long series.
pub fn mae(a: &[f64], b: &[f64]) -> Result<f64, AutomatonError> {
    if a.len() != b.len() {
        return Err(AutomatonError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Optimal one-to-one matching of predicted labels onto truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatching<P, T> {
    pub mapping: BTreeMap<P, T>,
    /// Steps whose predicted label maps onto their true label.
    pub matched: usize,
    pub total: usize,
}

impl<P, T> LabelMatching<P, T> {
    pub fn error(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            1.0 - self.matched as f64 / self.total as f64
        }
    }
}

/// Maximizes correctly attributed steps over injective label maps via the
/// Hungarian algorithm on the confusion matrix. Unmapped predicted labels
/// count all of their steps as errors.
pub fn match_labels<P, T>(predicted: &[P], truth: &[T]) -> Result<LabelMatching<P, T>, AutomatonError>
where
    P: Clone + Ord + Hash,
    T: Clone + Ord + Hash,
{
    if predicted.len() != truth.len() {
        return Err(AutomatonError::LengthMismatch(predicted.len(), truth.len()));
    }
    let p_labels: Vec<P> = predicted.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let t_labels: Vec<T> = truth.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if p_labels.is_empty() {
        return Ok(LabelMatching {
            mapping: BTreeMap::new(),
            matched: 0,
            total: 0,
        });
    }
    let p_idx: HashMap<&P, usize> = p_labels.iter().enumerate().map(|(i, l)| (l, i)).collect();
    let t_idx: HashMap<&T, usize> = t_labels.iter().enumerate().map(|(i, l)| (l, i)).collect();
    let size = p_labels.len().max(t_labels.len());
    let mut weights = Matrix::new(size, size, 0i64);
    for (p, t) in predicted.iter().zip(truth) {
        weights[(p_idx[p], t_idx[t])] += 1;
    }
    let (matched, assign) = kuhn_munkres(&weights);
    let mut mapping = BTreeMap::new();
    for (row, &col) in assign.iter().enumerate() {
        if row < p_labels.len() && col < t_labels.len() {
            mapping.insert(p_labels[row].clone(), t_labels[col].clone());
        }
    }
    Ok(LabelMatching {
        mapping,
        matched: matched as usize,
        total: predicted.len(),
    })
}

/// Fraction of misattributed steps under the optimal label matching.
pub fn attribution_error<P, T>(predicted: &[P], truth: &[T]) -> Result<f64, AutomatonError>
where
    P: Clone + Ord + Hash,
    T: Clone + Ord + Hash,
{
    Ok(match_labels(predicted, truth)?.error())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub attribution_error: f64,
    pub mae: Option<f64>,
    pub mode_count: usize,
    /// Learned mode name to ground-truth mode name.
    pub mapping: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn from_labels(predicted: &[String], truth: &[String], mae: Option<f64>) -> Result<Self, AutomatonError> {
        let m = match_labels(predicted, truth)?;
        let mode_count = predicted.iter().collect::<BTreeSet<_>>().len();
        Ok(Self {
            attribution_error: m.error(),
            mae,
            mode_count,
            mapping: m.mapping,
        })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "attribution_error {:.4}", self.attribution_error);
        if let Some(mae) = self.mae {
            let _ = writeln!(out, "mae {mae:.4}");
        }
        let _ = writeln!(out, "mode_count {}", self.mode_count);
        for (p, t) in &self.mapping {
            let _ = writeln!(out, "map {p} {t}");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Graph,
    Structured,
}

impl std::str::FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "graph" | "dot" => Ok(Self::Graph),
            "structured" | "json" => Ok(Self::Structured),
            other => Err(format!("unknown export format '{other}' (expected graph or structured)")),
        }
    }
}

pub fn export(ha: &HybridAutomaton, format: ExportFormat) -> Result<String, AutomatonError> {
    match format {
        ExportFormat::Graph => Ok(to_dot(ha)),
        ExportFormat::Structured => {
            let mut s = serde_json::to_string_pretty(ha)?;
            s.push('\n');
            Ok(s)
        }
    }
}

/// Parses the structured format.
pub fn import(text: &str) -> Result<HybridAutomaton, AutomatonError> {
    let ha: HybridAutomaton = serde_json::from_str(text)?;
    ha.validate()?;
    Ok(ha)
}

fn describe_mode(m: &ModeSpec, signal: &str) -> String {
    let mut parts = Vec::new();
    match &m.update {
        Update::None => {}
        Update::Set(x) => parts.push(format!("d{signal} := {x}")),
        Update::ClampMax(c) => parts.push(format!("d{signal} := min(d{signal}, {c})")),
        Update::FractionalOffset(b) => parts.push(format!("d{signal} := {b} + frac(d{signal})")),
    }
    match &m.flow {
        Flow::Velocity(c) => parts.push(format!("d{signal} = {c}")),
        Flow::Acceleration(a) => parts.push(format!("dd{signal} = {a}")),
    }
    parts.join("; ")
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Graphviz DOT: one node per mode, one labeled edge per transition.
pub fn to_dot(ha: &HybridAutomaton) -> String {
    // the modeled quantity is the derivative of the signal's base variable
    let base = ha.signal.strip_prefix('v').unwrap_or(&ha.signal);
    let mut out = String::new();
    out.push_str("digraph hybrid_automaton {\n  rankdir=LR;\n  node [shape=box];\n");
    let _ = writeln!(out, "  __start [shape=point];\n  __start -> \"{}\";", dot_escape(&ha.initial));
    for m in &ha.modes {
        let _ = writeln!(
            out,
            "  \"{}\" [label=\"{}\\n{}\"];",
            dot_escape(&m.name),
            dot_escape(&m.name),
            dot_escape(&describe_mode(m, base))
        );
    }
    for t in &ha.transitions {
        let mut label: Vec<String> = t.guard.conjuncts.iter().cloned().collect();
        if !t.guard.disjuncts.is_empty() {
            let d: Vec<&str> = t.guard.disjuncts.iter().map(String::as_str).collect();
            label.push(format!("({})", d.join(" | ")));
        }
        let label = if label.is_empty() {
            "?".to_string()
        } else {
            label.join(" & ")
        };
        let _ = writeln!(
            out,
            "  \"{}\" -> \"{}\" [label=\"{}\"];",
            dot_escape(&t.source),
            dot_escape(&t.target),
            dot_escape(&label)
        );
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guards::Guard;

    fn one_mode(flow: Flow) -> HybridAutomaton {
        HybridAutomaton {
            format: FORMAT_TAG.into(),
            signal: "vy".into(),
            dt: 1.0,
            modes: vec![ModeSpec {
                name: "m0".into(),
                flow,
                update: Update::None,
                update_semantics: ResetSemantics::Continuous,
                extremum: None,
            }],
            transitions: vec![],
            initial: "m0".into(),
        }
    }

    #[test]
    fn closed_form_without_transitions() {
        let ha = one_mode(Flow::Acceleration(Interval::point(-0.25)));
        let init = SimState {
            mode: "m0".into(),
            value: 3.0,
        };
        let sim = simulate(&ha, &IndexMap::new(), 10, &init, &SimConfig::default()).unwrap();
        for (k, v) in sim.values.iter().enumerate() {
            assert!((v - (3.0 - 0.25 * k as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn one_node_graph() {
        let ha = one_mode(Flow::Velocity(Interval::new(-0.1, 0.1)));
        let dot = export(&ha, ExportFormat::Graph).unwrap();
        assert_eq!(dot.matches("[label=").count(), 1);
        assert!(!dot.contains("\"m0\" -> "));
    }

    #[test]
    fn structured_round_trip() {
        let mut ha = one_mode(Flow::Velocity(Interval::new(-0.1, 0.1)));
        ha.modes.push(ModeSpec {
            name: "m1".into(),
            flow: Flow::Acceleration(Interval::new(-0.14, -0.13)),
            update: Update::Set(Interval::new(3.97, 4.1)),
            update_semantics: ResetSemantics::Reset,
            extremum: Some((0.1, 4.0)),
        });
        ha.transitions.push(Transition {
            source: "m0".into(),
            target: "m1".into(),
            guard: Guard {
                conjuncts: ["a_pressed".to_string()].into(),
                ..Default::default()
            },
        });
        let text = export(&ha, ExportFormat::Structured).unwrap();
        assert!(text.contains(FORMAT_TAG));
        assert_eq!(import(&text).unwrap(), ha);
    }

    #[test]
    fn import_rejects_dangling_edges() {
        let mut ha = one_mode(Flow::Velocity(Interval::point(0.0)));
        ha.transitions.push(Transition {
            source: "m0".into(),
            target: "nowhere".into(),
            guard: Guard::default(),
        });
        let text = export(&ha, ExportFormat::Structured).unwrap();
        assert!(matches!(import(&text), Err(AutomatonError::UnknownMode(_))));
    }

    #[test]
    fn attribution_basics() {
        let truth = ["a", "a", "b", "b", "c"];
        assert_eq!(attribution_error(&truth, &truth).unwrap(), 0.0);
        let renamed = [2, 2, 0, 0, 1];
        assert_eq!(attribution_error(&renamed, &truth).unwrap(), 0.0);
        assert!(attribution_error(&[1, 2], &truth).is_err());
        // more predicted labels than truth labels: the extra one is wrong
        let split = [0, 1, 2, 2, 3];
        assert!((attribution_error(&split, &truth).unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn ambiguous_edges_are_reported() {
        let mut ha = one_mode(Flow::Velocity(Interval::point(0.0)));
        for name in ["m1", "m2"] {
            ha.modes.push(ModeSpec {
                name: name.into(),
                ..ha.modes[0].clone()
            });
        }
        for (target, p) in [("m1", "p"), ("m2", "q")] {
            ha.transitions.push(Transition {
                source: "m0".into(),
                target: target.into(),
                guard: Guard {
                    conjuncts: [p.to_string()].into(),
                    ..Default::default()
                },
            });
        }
        let mut exo = IndexMap::new();
        exo.insert("p".to_string(), vec![false, true, false]);
        exo.insert("q".to_string(), vec![false, true, false]);
        let init = SimState {
            mode: "m0".into(),
            value: 0.0,
        };
        let err = simulate(&ha, &exo, 3, &init, &SimConfig::default()).unwrap_err();
        assert!(err.to_string().contains("m0 -> m1, m0 -> m2"), "{err}");
    }

    fn three_modes(flow: Flow, guards: [(&str, Guard); 2]) -> HybridAutomaton {
        let mut ha = one_mode(flow);
        for name in ["m1", "m2"] {
            ha.modes.push(ModeSpec {
                name: name.into(),
                flow: Flow::Velocity(Interval::point(if name == "m1" { 1.0 } else { 2.0 })),
                ..ha.modes[0].clone()
            });
        }
        for (target, guard) in guards {
            ha.transitions.push(Transition {
                source: "m0".into(),
                target: target.into(),
                guard,
            });
        }
        ha
    }

    fn guard(conj: &[&str], disj: &[&str], events: usize) -> Guard {
        Guard {
            conjuncts: conj.iter().map(|s| s.to_string()).collect(),
            disjuncts: disj.iter().map(|s| s.to_string()).collect(),
            events,
            ..Default::default()
        }
    }

    #[test]
    fn conjunct_guard_beats_disjunct_fallback() {
        let ha = three_modes(
            Flow::Velocity(Interval::point(0.0)),
            [("m1", guard(&[], &["p"], 9)), ("m2", guard(&["p"], &[], 1))],
        );
        let mut exo = IndexMap::new();
        exo.insert("p".to_string(), vec![false, true, false, false]);
        let init = SimState {
            mode: "m0".into(),
            value: 0.0,
        };
        let sim = simulate(&ha, &exo, 4, &init, &SimConfig::default()).unwrap();
        assert_eq!(sim.modes, vec![0, 0, 2, 2]);
        assert_eq!(sim.values[3], 2.0);
    }

    #[test]
    fn disjunct_fallback_fires_alone() {
        let ha = three_modes(
            Flow::Velocity(Interval::point(0.0)),
            [("m1", guard(&[], &["p", "q"], 3)), ("m2", guard(&[], &[], 5))],
        );
        let mut exo = IndexMap::new();
        exo.insert("p".to_string(), vec![false, false, false, false, false]);
        exo.insert("q".to_string(), vec![false, false, true, true, false]);
        let init = SimState {
            mode: "m0".into(),
            value: 0.0,
        };
        let sim = simulate(&ha, &exo, 5, &init, &SimConfig::default()).unwrap();
        assert_eq!(sim.modes, vec![0, 0, 0, 1, 1]);
    }

    #[test]
    fn endogenous_tie_prefers_more_events() {
        // Falling through zero enables both sign guards on the same step.
        let ha = three_modes(
            Flow::Acceleration(Interval::point(-0.4)),
            [
                ("m1", guard(&["vy_sign_zero"], &[], 2)),
                ("m2", guard(&["vy_sign_neg"], &[], 3)),
            ],
        );
        let init = SimState {
            mode: "m0".into(),
            value: 0.3,
        };
        let sim = simulate(&ha, &IndexMap::new(), 4, &init, &SimConfig::default()).unwrap();
        // 0.3 then -0.1: negative and within half a step of the crossing
        assert_eq!(sim.modes, vec![0, 0, 2, 2]);
    }

    #[test]
    fn nearest_sample_to_crossing_counts_as_zero() {
        let ha = three_modes(
            Flow::Acceleration(Interval::point(-0.4)),
            [("m1", guard(&["vy_sign_zero"], &[], 1)), ("m2", guard(&[], &[], 1))],
        );
        let init = SimState {
            mode: "m0".into(),
            value: 0.5,
        };
        let sim = simulate(&ha, &IndexMap::new(), 4, &init, &SimConfig::default()).unwrap();
        // 0.5 then 0.1: 0.1 is nearer the crossing than the next sample -0.3
        assert_eq!(sim.modes, vec![0, 0, 1, 1]);
    }
}
