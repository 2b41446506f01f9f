//! End-to-end learning: segmentation, merging, guards, assembly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::automaton::{assemble, attribution_error, AutomatonError, HybridAutomaton};
use crate::generators::{
    default_mario_script, gen_lawnmower, gen_mario, gen_random_maneuvers, GeneratorError, LabeledTrace,
};
use crate::guards::{guard_report, resolve_nondeterminism, AutomatonDraft, GuardConfig, GuardContext, GuardError};
use crate::segmentation::{
    merge_mode_set, optimal_segmentation, MergeLog, ModeSet, Segmentation, SegmentationConfig, SegmentationError,
};
use crate::trace::{PredicateKind, Trace, TraceError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Segmentation(#[from] SegmentationError),
    #[error(transparent)]
    Guard(#[from] GuardError),
    #[error(transparent)]
    Automaton(#[from] AutomatonError),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LearnConfig {
    pub segmentation: SegmentationConfig,
    pub guard: GuardConfig,
}

/// Every intermediate artifact of one learning run.
#[derive(Debug, Clone)]
pub struct Learned {
    pub segmentation: Segmentation,
    pub merge_log: MergeLog,
    /// Target pairs merged to remove non-determinism.
    pub resolved: Vec<(usize, usize)>,
    pub draft: AutomatonDraft,
    pub automaton: HybridAutomaton,
}

impl Learned {
    pub fn modes(&self) -> &ModeSet {
        &self.draft.modes
    }

    /// Mode name per step.
    pub fn labels(&self) -> Vec<String> {
        self.draft
            .modes
            .assignment
            .iter()
            .map(|&m| self.automaton.modes[m].name.clone())
            .collect()
    }

    pub fn guard_report(&self) -> String {
        let names: Vec<String> = self.automaton.modes.iter().map(|m| m.name.clone()).collect();
        guard_report(&self.draft.guards, &names)
    }
}

/// Adds the endogenous predicates of `signal` unless the trace already
/// carries them.
pub fn prepare(trace: &Trace, signal: &str) -> Result<Trace, TraceError> {
    let present = trace
        .predicates()
        .iter()
        .any(|(n, p)| p.kind == PredicateKind::Endogenous && n.starts_with(&format!("{signal}_")));
    if present {
        Ok(trace.clone())
    } else {
        trace.compute_endogenous_predicates(signal)
    }
}

/// Learns an automaton for `signal`.
pub fn learn(trace: &Trace, signal: &str, cfg: &LearnConfig) -> Result<Learned, PipelineError> {
    cfg.guard.validate()?;
    let trace = prepare(trace, signal)?;
    let values = trace.signal(signal)?;
    let segmentation = optimal_segmentation(values, &cfg.segmentation)?;
    let initial = ModeSet::from_segmentation(&segmentation, cfg.segmentation.criterion);
    let (merged, merge_log) = merge_mode_set(initial, &cfg.segmentation.templates, &cfg.segmentation.fit);
    let ctx = GuardContext {
        trace: &trace,
        signal: Some(signal),
        templates: &cfg.segmentation.templates,
        fit: &cfg.segmentation.fit,
        guard: &cfg.guard,
    };
    let draft = ctx.learn(merged)?;
    let (draft, resolved) = resolve_nondeterminism(draft, &ctx)?;
    let automaton = assemble(&draft.modes, &draft.guards, &trace, signal)?;
    Ok(Learned {
        segmentation,
        merge_log,
        resolved,
        draft,
        automaton,
    })
}

/// Built-in generated scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Lawnmower,
    Random,
    Mario,
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lawnmower" => Ok(Self::Lawnmower),
            "random" => Ok(Self::Random),
            "mario" => Ok(Self::Mario),
            other => Err(format!("unknown scenario '{other}' (expected lawnmower, random or mario)")),
        }
    }
}

impl Scenario {
    /// Default-parameter trace for `seed`.
    pub fn generate(self, seed: u64) -> Result<LabeledTrace, GeneratorError> {
        match self {
            Scenario::Lawnmower => gen_lawnmower(&Default::default(), seed),
            Scenario::Random => gen_random_maneuvers(&Default::default(), seed),
            Scenario::Mario => gen_mario(&default_mario_script(seed), false),
        }
    }

    /// The learned signal, derived from position for the platformer.
    pub fn signal(self) -> &'static str {
        match self {
            Scenario::Lawnmower | Scenario::Random => "heading_rate",
            Scenario::Mario => "vy",
        }
    }

    /// The trace as handed to [`learn`].
    pub fn learning_trace(self, lt: &LabeledTrace) -> Result<Trace, TraceError> {
        match self {
            Scenario::Mario => lt.trace.derive_signal("y", "vy"),
            _ => Ok(lt.trace.clone()),
        }
    }
}

/// Attribution error of one generated trial.
pub fn run_trial(scenario: Scenario, seed: u64, cfg: &LearnConfig) -> Result<f64, PipelineError> {
    let lt = scenario.generate(seed)?;
    let trace = scenario.learning_trace(&lt)?;
    let learned = learn(&trace, scenario.signal(), cfg)?;
    Ok(attribution_error(&learned.labels(), &lt.labels)?)
}

/// Attribution errors of `trials` trials with seeds `seed, seed + 1, ...`,
/// run in parallel and returned in seed order.
pub fn run_trials(scenario: Scenario, trials: usize, seed: u64, cfg: &LearnConfig) -> Result<Vec<f64>, PipelineError> {
    (0..trials as u64)
        .into_par_iter()
        .map(|i| run_trial(scenario, seed.wrapping_add(i), cfg))
        .collect()
}

/// Mean after sorting and, when `trim` is set and more than two values
/// are present, dropping the smallest and largest.
pub fn trimmed_mean(values: &[f64], trim: bool) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let kept = if trim && v.len() > 2 { &v[1..v.len() - 1] } else { &v[..] };
    if kept.is_empty() {
        return 0.0;
    }
    kept.iter().sum::<f64>() / kept.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trimming_drops_extremes() {
        assert_eq!(trimmed_mean(&[5.0, 1.0, 2.0, 3.0], true), 2.5);
        assert_eq!(trimmed_mean(&[1.0, 3.0], true), 2.0);
        assert_eq!(trimmed_mean(&[], false), 0.0);
    }

    #[test]
    fn prepare_keeps_existing_predicates() {
        let tr = Trace::new(1.0, 4).unwrap().with_signal("v", vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        let once = prepare(&tr, "v").unwrap();
        assert!(once.predicates().contains_key("v_zc_down"));
        assert_eq!(prepare(&once, "v").unwrap(), once);
    }
}
