//! Optimal switchpoint search and post-segmentation mode merging.
//!
//! `optimal_segmentation` solves the penalized segmented least-squares
//! problem exactly: `O[0] = 0` and
//! `O[j] = min over i, m of O[i] + C[i, j, m]` for half-open intervals
//! `[i, j)`, where `C` is the negative log-likelihood of template `m` fit
//! on the interval plus its complexity penalty. `merge_modes` then greedily
//! pools segments into modes while pooling lowers the global objective.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{
    best_loglik_fit, min_points, segment_cost, FitConfig, FittedModel, PenaltyCriterion, PrefixStats,
    TemplateSet,
};

/// Below this many candidate start points a DP column is scanned serially.
const PAR_THRESHOLD: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentationError {
    #[error("trace too short: {len} step(s), minimum segment is {min}")]
    TooShort { len: usize, min: usize },
    #[error("stride must be at least 1")]
    BadStride,
    #[error("no template can be fit with minimum segment length {0}")]
    NoFeasibleTemplate(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub criterion: PenaltyCriterion,
    pub templates: TemplateSet,
    pub fit: FitConfig,
    /// Candidate switchpoints are multiples of `stride` (plus the end).
    pub stride: usize,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            criterion: PenaltyCriterion::Bic,
            templates: TemplateSet::default(),
            fit: FitConfig::default(),
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub model: FittedModel,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    /// `0 = s0 < s1 < ... < sK = n`.
    pub switchpoints: Vec<usize>,
    pub segments: Vec<Segment>,
    pub total_cost: f64,
    /// The DP table: optimal cumulative cost up to each candidate endpoint
    /// (`None` where no valid segmentation ends).
    pub prefix_cost: Vec<Option<f64>>,
}

#[derive(Clone, Copy, Debug)]
struct Cell {
    cost: f64,
    segments: usize,
    template: usize,
    start: usize,
}

impl Cell {
    /// Cost, then fewer segments, then earlier template, then earlier start.
    fn cmp_key(&self, other: &Self) -> Ordering {
        self.cost
            .total_cmp(&other.cost)
            .then(self.segments.cmp(&other.segments))
            .then(self.template.cmp(&other.template))
            .then(self.start.cmp(&other.start))
    }

    fn min(self, other: Self) -> Self {
        if other.cmp_key(&self) == Ordering::Less {
            other
        } else {
            self
        }
    }
}

/// Exact minimum-cost segmentation of `values`.
pub fn optimal_segmentation(values: &[f64], cfg: &SegmentationConfig) -> Result<Segmentation, SegmentationError> {
    if cfg.stride == 0 {
        return Err(SegmentationError::BadStride);
    }
    let n = values.len();
    let min_len = cfg
        .templates
        .iter()
        .map(|t| min_points(t, &cfg.fit))
        .min()
        .ok_or(SegmentationError::NoFeasibleTemplate(cfg.fit.min_segment))?;
    if n < min_len.max(cfg.fit.min_segment) {
        return Err(SegmentationError::TooShort {
            len: n,
            min: min_len.max(cfg.fit.min_segment),
        });
    }
    let table = PrefixStats::new(values);
    let mut best: Vec<Option<Cell>> = vec![None; n + 1];
    best[0] = Some(Cell {
        cost: 0.0,
        segments: 0,
        template: 0,
        start: 0,
    });
    let is_candidate = |j: usize| j == n || j.is_multiple_of(cfg.stride);
    let mut starts: Vec<usize> = Vec::new();

    for j in 1..=n {
        if !is_candidate(j) || j < min_len {
            continue;
        }
        let eval = |i: usize| -> Option<Cell> {
            let prev = best[i]?;
            let mut out: Option<Cell> = None;
            for (m, template) in cfg.templates.iter().enumerate() {
                let Ok((c, _)) = segment_cost(&table, i, j, template, cfg.criterion, &cfg.fit) else {
                    continue;
                };
                let cell = Cell {
                    cost: prev.cost + c,
                    segments: prev.segments + 1,
                    template: m,
                    start: i,
                };
                out = Some(match out {
                    Some(o) => o.min(cell),
                    None => cell,
                });
            }
            out
        };
        let upto = starts.partition_point(|&i| i + min_len <= j);
        let window = &starts[..upto];
        let column = if window.len() >= PAR_THRESHOLD {
            window
                .par_iter()
                .filter_map(|&i| eval(i))
                .reduce_with(Cell::min)
        } else {
            window.iter().filter_map(|&i| eval(i)).reduce(Cell::min)
        };
        // start 0 is always admissible and not kept in `starts`
        let column = match (eval(0), column) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        best[j] = column;
        if best[j].is_some() && j < n {
            starts.push(j);
        }
    }

    let Some(last) = best[n] else {
        return Err(SegmentationError::TooShort { len: n, min: min_len });
    };
    let mut segments = Vec::with_capacity(last.segments);
    let mut j = n;
    while j > 0 {
        let cell = best[j].expect("backpointer to a reachable cell");
        let template = cfg.templates.get(cell.template);
        let (cost, model) = segment_cost(&table, cell.start, j, template, cfg.criterion, &cfg.fit)
            .expect("cost was computable during the forward pass");
        segments.push(Segment {
            start: cell.start,
            end: j,
            model,
            cost,
        });
        j = cell.start;
    }
    segments.reverse();
    let mut switchpoints: Vec<usize> = segments.iter().map(|s| s.start).collect();
    switchpoints.push(n);
    Ok(Segmentation {
        switchpoints,
        segments,
        total_cost: last.cost,
        prefix_cost: best.iter().map(|c| c.map(|c| c.cost)).collect(),
    })
}

impl Segmentation {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// One line per segment.
    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# segmentation segments={} total_cost={:.6}",
            self.segments.len(),
            self.total_cost
        );
        for s in &self.segments {
            let _ = writeln!(
                out,
                "segment start={} end={} template={} coefficients={} sigma2={:.6} cost={:.6}",
                s.start,
                s.end,
                s.model.template.id,
                fmt_coefficients(&s.model.coefficients),
                s.model.sigma2,
                s.cost
            );
        }
        out
    }
}

pub(crate) fn fmt_coefficients(c: &[f64]) -> String {
    let inner: Vec<String> = c.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", inner.join(","))
}

/// A mode: a pooled model and the intervals it occupies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    /// Disjoint `[start, end)` intervals in increasing order.
    pub occurrences: Vec<(usize, usize)>,
    pub model: FittedModel,
}

impl Mode {
    pub fn steps(&self) -> usize {
        self.occurrences.iter().map(|(s, e)| e - s).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSet {
    pub modes: Vec<Mode>,
    /// Mode index of every step.
    pub assignment: Vec<usize>,
    pub criterion: PenaltyCriterion,
}

impl ModeSet {
    /// One mode per segment, as produced by the DP.
    pub fn from_segmentation(seg: &Segmentation, criterion: PenaltyCriterion) -> Self {
        let modes = seg
            .segments
            .iter()
            .map(|s| Mode {
                occurrences: vec![(s.start, s.end)],
                model: s.model.clone(),
            })
            .collect();
        Self::canonical(modes, criterion)
    }

    /// Orders modes by first occurrence and rebuilds the assignment.
    pub fn canonical(mut modes: Vec<Mode>, criterion: PenaltyCriterion) -> Self {
        for m in &mut modes {
            m.occurrences.sort_unstable();
        }
        modes.sort_by_key(|m| m.occurrences[0].0);
        let n = modes
            .iter()
            .flat_map(|m| m.occurrences.iter().map(|o| o.1))
            .max()
            .unwrap_or(0);
        let mut assignment = vec![usize::MAX; n];
        for (idx, m) in modes.iter().enumerate() {
            for &(s, e) in &m.occurrences {
                assignment[s..e].iter_mut().for_each(|a| *a = idx);
            }
        }
        Self {
            modes,
            assignment,
            criterion,
        }
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// `sum over modes of -loglik + pen`.
    pub fn objective(&self) -> f64 {
        self.modes.iter().map(|m| m.model.cost(self.criterion)).sum()
    }

    /// All occurrence intervals in trace order with their mode index.
    pub fn timeline(&self) -> Vec<(usize, usize, usize)> {
        let mut out: Vec<(usize, usize, usize)> = self
            .modes
            .iter()
            .enumerate()
            .flat_map(|(idx, m)| m.occurrences.iter().map(move |&(s, e)| (s, e, idx)))
            .collect();
        out.sort_unstable();
        out
    }

    /// Merges mode `b` into mode `a`, refitting the pooled data with the
    /// most likely template. Returns the canonicalized set.
    pub fn merge_pair(&self, a: usize, b: usize, templates: &TemplateSet, fit: &FitConfig) -> Option<ModeSet> {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let pooled = self.modes[lo].model.stats + self.modes[hi].model.stats;
        let model = best_loglik_fit(templates, &pooled, fit.sigma2_floor)?;
        let mut modes = self.modes.clone();
        let removed = modes.remove(hi);
        modes[lo].occurrences.extend(removed.occurrences);
        modes[lo].model = model;
        Some(Self::canonical(modes, self.criterion))
    }

    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# modes count={} objective={:.6} penalty={}",
            self.modes.len(),
            self.objective(),
            self.criterion
        );
        for (idx, m) in self.modes.iter().enumerate() {
            let occ: Vec<String> = m.occurrences.iter().map(|(s, e)| format!("{s}..{e}")).collect();
            let _ = writeln!(
                out,
                "mode id={idx} template={} coefficients={} sigma2={:.6} cost={:.6} steps={} occurrences={}",
                m.model.template.id,
                fmt_coefficients(&m.model.coefficients),
                m.model.sigma2,
                m.model.cost(self.criterion),
                m.steps(),
                occ.join(",")
            );
        }
        out
    }
}

/// Record of one merge pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeLog {
    /// Objective before any merge, then after each round.
    pub objectives: Vec<f64>,
    /// Mode indices merged in each round (indices at that round).
    pub merges: Vec<(usize, usize)>,
}

/// Merges the segments of `seg` into modes.
pub fn merge_modes(seg: &Segmentation, templates: &TemplateSet, criterion: PenaltyCriterion, fit: &FitConfig) -> ModeSet {
    merge_mode_set(ModeSet::from_segmentation(seg, criterion), templates, fit).0
}

/// Best-improvement greedy merging to a fixpoint: each round applies the
/// single pair whose pooled refit lowers the objective the most.
pub fn merge_mode_set(set: ModeSet, templates: &TemplateSet, fit: &FitConfig) -> (ModeSet, MergeLog) {
    let criterion = set.criterion;
    let mut modes = set.modes;
    let mut log = MergeLog {
        objectives: vec![modes.iter().map(|m| m.model.cost(criterion)).sum()],
        merges: Vec::new(),
    };
    let gain = |a: &Mode, b: &Mode| -> Option<(f64, FittedModel)> {
        let pooled = a.model.stats + b.model.stats;
        let merged = best_loglik_fit(templates, &pooled, fit.sigma2_floor)?;
        let g = a.model.cost(criterion) + b.model.cost(criterion) - merged.cost(criterion);
        (g > 0.0).then_some((g, merged))
    };
    // gains[a][b - a - 1] for a < b
    let mut gains: Vec<Vec<Option<f64>>> = (0..modes.len())
        .into_par_iter()
        .map(|a| {
            (a + 1..modes.len())
                .map(|b| gain(&modes[a], &modes[b]).map(|g| g.0))
                .collect()
        })
        .collect();

    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for (a, row) in gains.iter().enumerate() {
            for (off, g) in row.iter().enumerate() {
                if let Some(g) = *g {
                    if best.is_none_or(|(bg, _, _)| g > bg) {
                        best = Some((g, a, a + 1 + off));
                    }
                }
            }
        }
        let Some((_, a, b)) = best else { break };
        let (_, merged) = gain(&modes[a], &modes[b]).expect("cached gain is reproducible");
        let removed = modes.remove(b);
        modes[a].occurrences.extend(removed.occurrences);
        modes[a].occurrences.sort_unstable();
        modes[a].model = merged;
        log.merges.push((a, b));
        log.objectives.push(modes.iter().map(|m| m.model.cost(criterion)).sum());

        gains.remove(b);
        for (r, row) in gains.iter_mut().enumerate().take(b) {
            row.remove(b - r - 1);
        }
        for r in 0..a {
            gains[r][a - r - 1] = gain(&modes[r], &modes[a]).map(|g| g.0);
        }
        gains[a] = (a + 1..modes.len())
            .map(|c| gain(&modes[a], &modes[c]).map(|g| g.0))
            .collect();
    }
    (ModeSet::canonical(modes, criterion), log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelTemplate;

    fn cfg(templates: &str, floor: f64) -> SegmentationConfig {
        SegmentationConfig {
            criterion: PenaltyCriterion::Bic,
            templates: templates.parse().unwrap(),
            fit: FitConfig {
                sigma2_floor: floor,
                min_segment: 3,
            },
            stride: 1,
        }
    }

    #[test]
    fn step_change_found_at_five() {
        let v = [1.0, 1.0, 1.0, 1.0, 1.0, 9.0, 9.0, 9.0, 9.0, 9.0];
        let seg = optimal_segmentation(&v, &cfg("constant", 1e-4)).unwrap();
        assert_eq!(seg.switchpoints, vec![0, 5, 10]);
    }

    #[test]
    fn constant_data_is_one_segment() {
        for c in [PenaltyCriterion::Bic, PenaltyCriterion::Mdl] {
            let mut conf = cfg("constant,linear", 1.0 / 12.0);
            conf.criterion = c;
            let seg = optimal_segmentation(&[2.5; 40], &conf).unwrap();
            assert_eq!(seg.switchpoints, vec![0, 40]);
            assert_eq!(seg.segments[0].model.template.id, "constant");
        }
    }

    #[test]
    fn too_short_trace() {
        let err = optimal_segmentation(&[1.0, 2.0], &cfg("constant", 1e-4)).unwrap_err();
        assert!(err.to_string().starts_with("trace too short"));
        assert_eq!(optimal_segmentation(&[1.0; 3], &cfg("constant", 1e-4)).unwrap().len(), 1);
    }

    #[test]
    fn stride_restricts_switchpoints() {
        let v: Vec<f64> = (0..30).map(|k| if k < 13 { 0.0 } else { 5.0 }).collect();
        let mut conf = cfg("constant", 1e-4);
        conf.stride = 5;
        let seg = optimal_segmentation(&v, &conf).unwrap();
        assert!(seg.switchpoints.iter().all(|&s| s % 5 == 0 || s == 30));
        conf.stride = 0;
        assert_eq!(optimal_segmentation(&v, &conf).unwrap_err(), SegmentationError::BadStride);
    }

    #[test]
    fn single_segment_merges_to_itself() {
        let seg = optimal_segmentation(&[3.0; 12], &cfg("constant,linear", 1e-4)).unwrap();
        let conf = cfg("constant,linear", 1e-4);
        let modes = merge_modes(&seg, &conf.templates, conf.criterion, &conf.fit);
        assert_eq!(modes.len(), 1);
        assert_eq!(modes.modes[0].occurrences, vec![(0, 12)]);
        assert_eq!(modes.assignment, vec![0; 12]);
    }

    #[test]
    fn merge_pair_pools_occurrences() {
        let v: Vec<f64> = [vec![2.0; 10], vec![7.0; 10], vec![2.0; 10]].concat();
        let conf = cfg("constant,linear", 1e-2);
        let seg = optimal_segmentation(&v, &conf).unwrap();
        assert_eq!(seg.len(), 3);
        let set = ModeSet::from_segmentation(&seg, conf.criterion);
        let merged = set.merge_pair(0, 2, &conf.templates, &conf.fit).unwrap();
        assert_eq!(merged.len(), 2);
        assert_eq!(merged.modes[0].occurrences, vec![(0, 10), (20, 30)]);
        assert_eq!(merged.modes[0].model.template, ModelTemplate::constant());
        assert_eq!(merged.assignment[25], 0);
    }
}
