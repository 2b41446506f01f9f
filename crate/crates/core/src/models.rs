//! Flow templates, least-squares fitting from additive sufficient statistics,
//! Gaussian log-likelihood and the BIC / MDL complexity penalties.
//!
//! Every template regresses the signal on a basis of the *relative* step
//! index `k = 0, 1, ...` inside an interval, so a fit does not depend on where
//! the interval sits in the trace. That is what lets non-contiguous
//! occurrences of one mode be pooled: the pooled statistics are simply the
//! sum of the per-occurrence statistics.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

/// Default variance floor: variance of uniform +-0.5 quantization noise.
pub const DEFAULT_SIGMA2_FLOOR: f64 = 1.0 / 12.0;

/// Default minimum segment length in steps.
pub const DEFAULT_MIN_SEGMENT: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("interval of {len} step(s) is too short for template '{template}' (need {need})")]
    TooShort {
        template: String,
        len: usize,
        need: usize,
    },
    #[error("degenerate design for template '{0}'")]
    Degenerate(String),
    #[error("unknown template '{0}' (known: constant, linear)")]
    UnknownTemplate(String),
    #[error("template list is empty")]
    EmptyTemplateSet,
    #[error("duplicate template '{0}'")]
    DuplicateTemplate(String),
    #[error("unknown penalty '{0}' (expected bic or mdl)")]
    UnknownPenalty(String),
}

/// Regressors of the relative step index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    /// `{1}`: constant velocity.
    Constant,
    /// `{1, k}`: reset value plus constant acceleration.
    Linear,
}

impl Basis {
    pub fn len(self) -> usize {
        match self {
            Basis::Constant => 1,
            Basis::Linear => 2,
        }
    }

    pub fn is_empty(self) -> bool {
        false
    }
}

/// What a mode's entry does to the signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResetSemantics {
    Reset,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelTemplate {
    pub id: String,
    pub basis: Basis,
    pub reset_semantics: ResetSemantics,
}

impl ModelTemplate {
    pub fn constant() -> Self {
        Self {
            id: "constant".into(),
            basis: Basis::Constant,
            reset_semantics: ResetSemantics::Reset,
        }
    }

    pub fn linear() -> Self {
        Self {
            id: "linear".into(),
            basis: Basis::Linear,
            reset_semantics: ResetSemantics::Reset,
        }
    }

    pub fn by_name(name: &str) -> Result<Self, ModelError> {
        match name {
            "constant" => Ok(Self::constant()),
            "linear" => Ok(Self::linear()),
            other => Err(ModelError::UnknownTemplate(other.to_string())),
        }
    }

    /// Free parameters: coefficients plus the noise variance.
    pub fn dim(&self) -> usize {
        self.basis.len() + 1
    }
}

/// The ordered template set `M`. Order matters for tie-breaking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet(Vec<ModelTemplate>);

impl TemplateSet {
    pub fn new(templates: Vec<ModelTemplate>) -> Result<Self, ModelError> {
        if templates.is_empty() {
            return Err(ModelError::EmptyTemplateSet);
        }
        for (i, t) in templates.iter().enumerate() {
            if templates[..i].iter().any(|u| u.id == t.id) {
                return Err(ModelError::DuplicateTemplate(t.id.clone()));
            }
        }
        Ok(Self(templates))
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ModelTemplate> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, idx: usize) -> &ModelTemplate {
        &self.0[idx]
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.0.iter().position(|t| t.id == id)
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self(vec![ModelTemplate::constant(), ModelTemplate::linear()])
    }
}

impl FromStr for TemplateSet {
    type Err = ModelError;

    /// Comma-separated template names, e.g. `constant,linear`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let templates = s
            .split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(ModelTemplate::by_name)
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(templates)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyCriterion {
    Bic,
    Mdl,
}

impl FromStr for PenaltyCriterion {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bic" => Ok(Self::Bic),
            "mdl" => Ok(Self::Mdl),
            _ => Err(ModelError::UnknownPenalty(s.to_string())),
        }
    }
}

impl fmt::Display for PenaltyCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bic => "bic",
            Self::Mdl => "mdl",
        })
    }
}

/// Complexity penalty for a model with `dim` parameters fit to `n` points.
///
/// BIC: `dim * ln(n) / 2`. MDL: `dim * (1 + ln(n) / 2)`, evaluated as the BIC
/// value plus `dim`.
///
/// The BIC value is rounded onto the float grid of `bic + dim` (a shift of
/// at most half an ulp there) so that `mdl - bic == dim` holds exactly.
pub fn penalty(criterion: PenaltyCriterion, dim: usize, n: usize) -> f64 {
    assert!(dim >= 1 && n >= 1, "penalty needs dim >= 1 and n >= 1");
    let d = dim as f64;
    let mdl = d * (n as f64).ln() / 2.0 + d;
    match criterion {
        // exact: both operands are multiples of ulp(mdl)
        PenaltyCriterion::Bic => mdl - d,
        PenaltyCriterion::Mdl => mdl,
    }
}

/// Fitting knobs shared by segmentation and merging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub sigma2_floor: f64,
    pub min_segment: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            sigma2_floor: DEFAULT_SIGMA2_FLOOR,
            min_segment: DEFAULT_MIN_SEGMENT,
        }
    }
}

/// Additive sufficient statistics of `(k, v)` pairs where `k` is the
/// relative step index within each pooled occurrence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SuffStats {
    pub n: usize,
    pub sum_k: f64,
    pub sum_kk: f64,
    pub sum_v: f64,
    pub sum_kv: f64,
    pub sum_vv: f64,
}

impl SuffStats {
    /// Statistics of one contiguous occurrence, indexed from 0.
    pub fn from_slice(values: &[f64]) -> Self {
        let mut s = Self::default();
        for (k, &v) in values.iter().enumerate() {
            let k = k as f64;
            s.n += 1;
            s.sum_k += k;
            s.sum_kk += k * k;
            s.sum_v += v;
            s.sum_kv += k * v;
            s.sum_vv += v * v;
        }
        s
    }

    /// Sum of squared deviations from the mean.
    fn centered_vv(&self) -> f64 {
        self.sum_vv - self.sum_v * self.sum_v / self.n as f64
    }
}

impl Add for SuffStats {
    type Output = SuffStats;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for SuffStats {
    fn add_assign(&mut self, rhs: Self) {
        self.n += rhs.n;
        self.sum_k += rhs.sum_k;
        self.sum_kk += rhs.sum_kk;
        self.sum_v += rhs.sum_v;
        self.sum_kv += rhs.sum_kv;
        self.sum_vv += rhs.sum_vv;
    }
}

/// Prefix sums over a whole signal so that the statistics of any interval
/// `[i, j)` are available in O(1).
#[derive(Debug, Clone)]
pub struct PrefixStats {
    cum_v: Vec<f64>,
    cum_tv: Vec<f64>,
    cum_vv: Vec<f64>,
}

impl PrefixStats {
    pub fn new(values: &[f64]) -> Self {
        let n = values.len();
        let mut cum_v = Vec::with_capacity(n + 1);
        let mut cum_tv = Vec::with_capacity(n + 1);
        let mut cum_vv = Vec::with_capacity(n + 1);
        let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
        cum_v.push(a);
        cum_tv.push(b);
        cum_vv.push(c);
        for (t, &v) in values.iter().enumerate() {
            a += v;
            b += t as f64 * v;
            c += v * v;
            cum_v.push(a);
            cum_tv.push(b);
            cum_vv.push(c);
        }
        Self { cum_v, cum_tv, cum_vv }
    }

    /// Number of points covered.
    pub fn len(&self) -> usize {
        self.cum_v.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Statistics of `[i, j)` with relative index `k = t - i`.
    pub fn interval(&self, i: usize, j: usize) -> SuffStats {
        debug_assert!(i <= j && j <= self.len());
        let n = j - i;
        let nf = n as f64;
        let sum_v = self.cum_v[j] - self.cum_v[i];
        let sum_tv = self.cum_tv[j] - self.cum_tv[i];
        SuffStats {
            n,
            sum_k: nf * (nf - 1.0) / 2.0,
            sum_kk: (nf - 1.0) * nf * (2.0 * nf - 1.0) / 6.0,
            sum_v,
            sum_kv: sum_tv - i as f64 * sum_v,
            sum_vv: self.cum_vv[j] - self.cum_vv[i],
        }
    }
}

/// A closed real interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn point(x: f64) -> Self {
        Self { lo: x, hi: x }
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:.4}, {:.4}]", self.lo, self.hi)
    }
}

/// A template instantiated by maximum likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub template: ModelTemplate,
    /// Intercept first, then slope for the linear template.
    pub coefficients: Vec<f64>,
    pub sigma2: f64,
    pub rss: f64,
    pub loglik: f64,
    /// `[i, j)` for single-interval fits; `None` for pooled fits.
    pub interval: Option<(usize, usize)>,
    pub dim: usize,
    pub stats: SuffStats,
}

impl FittedModel {
    pub fn n(&self) -> usize {
        self.stats.n
    }

    pub fn intercept(&self) -> f64 {
        self.coefficients[0]
    }

    /// Per-step slope; 0 for the constant template.
    pub fn slope(&self) -> f64 {
        self.coefficients.get(1).copied().unwrap_or(0.0)
    }

    pub fn predict(&self, k: usize) -> f64 {
        self.intercept() + self.slope() * k as f64
    }

    /// `-loglik + penalty`.
    pub fn cost(&self, criterion: PenaltyCriterion) -> f64 {
        -self.loglik + penalty(criterion, self.dim, self.n())
    }

    /// Two-sided `level` confidence intervals for each coefficient, from
    /// the unbiased residual variance `rss / (n - p)`.
    pub fn confidence_intervals(&self, level: f64) -> Vec<Interval> {
        let p = self.coefficients.len();
        let n = self.stats.n;
        let df = n.saturating_sub(p);
        if df == 0 {
            return self
                .coefficients
                .iter()
                .map(|_| Interval::new(f64::MIN, f64::MAX))
                .collect();
        }
        let s2 = self.rss / df as f64;
        let t = StudentsT::new(0.0, 1.0, df as f64)
            .map(|d| d.inverse_cdf(0.5 + level / 2.0))
            .unwrap_or(1.96);
        let nf = n as f64;
        let variances = match self.template.basis {
            Basis::Constant => vec![s2 / nf],
            Basis::Linear => {
                let det = nf * self.stats.sum_kk - self.stats.sum_k * self.stats.sum_k;
                vec![s2 * self.stats.sum_kk / det, s2 * nf / det]
            }
        };
        self.coefficients
            .iter()
            .zip(variances)
            .map(|(&c, var)| {
                let half = t * var.max(0.0).sqrt();
                Interval::new(c - half, c + half)
            })
            .collect()
    }
}

/// Gaussian log-likelihood of `rss` over `n` points at variance `sigma2`.
pub fn gaussian_loglik(n: usize, rss: f64, sigma2: f64) -> f64 {
    let nf = n as f64;
    -nf / 2.0 * ((2.0 * PI * sigma2).ln() + rss / (nf * sigma2))
}

/// Fits `template` to the values of one interval, indexed from 0.
pub fn fit(template: &ModelTemplate, data: &[f64], cfg: &FitConfig) -> Result<FittedModel, ModelError> {
    let need = min_points(template, cfg);
    if data.len() < need {
        return Err(ModelError::TooShort {
            template: template.id.clone(),
            len: data.len(),
            need,
        });
    }
    fit_stats(template, &SuffStats::from_slice(data), cfg.sigma2_floor)
}

/// Smallest interval `fit` accepts.
pub fn min_points(template: &ModelTemplate, cfg: &FitConfig) -> usize {
    (template.basis.len() + 1).max(cfg.min_segment)
}

/// Maximum-likelihood fit from sufficient statistics (pooled or single).
pub fn fit_stats(template: &ModelTemplate, stats: &SuffStats, sigma2_floor: f64) -> Result<FittedModel, ModelError> {
    let n = stats.n;
    if n < template.basis.len() {
        return Err(ModelError::TooShort {
            template: template.id.clone(),
            len: n,
            need: template.basis.len(),
        });
    }
    let nf = n as f64;
    let (coefficients, rss) = match template.basis {
        Basis::Constant => {
            let mean = stats.sum_v / nf;
            (vec![mean], stats.centered_vv())
        }
        Basis::Linear => {
            let sxx = stats.sum_kk - stats.sum_k * stats.sum_k / nf;
            if sxx.is_nan() || sxx <= 1e-12 * stats.sum_kk.max(1.0) {
                return Err(ModelError::Degenerate(template.id.clone()));
            }
            let sxy = stats.sum_kv - stats.sum_k * stats.sum_v / nf;
            let slope = sxy / sxx;
            let intercept = (stats.sum_v - slope * stats.sum_k) / nf;
            (vec![intercept, slope], stats.centered_vv() - slope * sxy)
        }
    };
    let rss = rss.max(0.0);
    let sigma2 = (rss / nf).max(sigma2_floor);
    Ok(FittedModel {
        template: template.clone(),
        coefficients,
        sigma2,
        rss,
        loglik: gaussian_loglik(n, rss, sigma2),
        interval: None,
        dim: template.dim(),
        stats: *stats,
    })
}

/// `C[i, j, m] = -loglik + pen(m, j - i)` using prefix statistics.
pub fn segment_cost(
    table: &PrefixStats,
    i: usize,
    j: usize,
    template: &ModelTemplate,
    criterion: PenaltyCriterion,
    cfg: &FitConfig,
) -> Result<(f64, FittedModel), ModelError> {
    let len = j.saturating_sub(i);
    let need = min_points(template, cfg);
    if len < need {
        return Err(ModelError::TooShort {
            template: template.id.clone(),
            len,
            need,
        });
    }
    let mut model = fit_stats(template, &table.interval(i, j), cfg.sigma2_floor)?;
    model.interval = Some((i, j));
    Ok((model.cost(criterion), model))
}

/// Picks the template with the highest likelihood on pooled statistics,
/// earlier templates winning ties. Templates that cannot be fit are skipped.
pub fn best_loglik_fit(templates: &TemplateSet, stats: &SuffStats, sigma2_floor: f64) -> Option<FittedModel> {
    let mut best: Option<FittedModel> = None;
    for t in templates.iter() {
        if let Ok(m) = fit_stats(t, stats, sigma2_floor) {
            if best.as_ref().is_none_or(|b| m.loglik > b.loglik) {
                best = Some(m);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(floor: f64) -> FitConfig {
        FitConfig {
            sigma2_floor: floor,
            min_segment: 3,
        }
    }

    #[test]
    fn linear_recovers_jump_parameters() {
        let m = fit(&ModelTemplate::linear(), &[4.0, 3.875, 3.75, 3.625], &cfg(1e-4)).unwrap();
        assert!((m.intercept() - 4.0).abs() < 1e-12);
        assert!((m.slope() + 0.125).abs() < 1e-12);
        assert_eq!(m.dim, 3);
    }

    #[test]
    fn constant_zero_hits_floor() {
        let m = fit(&ModelTemplate::constant(), &[0.0; 4], &FitConfig::default()).unwrap();
        assert_eq!(m.coefficients, vec![0.0]);
        assert_eq!(m.sigma2, DEFAULT_SIGMA2_FLOOR);
        assert_eq!(m.rss, 0.0);
    }

    #[test]
    fn too_short_and_degenerate() {
        let err = fit(&ModelTemplate::linear(), &[1.0, 2.0], &cfg(1e-4)).unwrap_err();
        assert!(matches!(err, ModelError::TooShort { need: 3, .. }));
        // three occurrences of length one: every k is 0
        let pooled = SuffStats::from_slice(&[1.0]) + SuffStats::from_slice(&[2.0]) + SuffStats::from_slice(&[3.0]);
        let err = fit_stats(&ModelTemplate::linear(), &pooled, 1e-4).unwrap_err();
        assert_eq!(err.to_string(), "degenerate design for template 'linear'");
    }

    #[test]
    fn penalty_closed_forms() {
        assert!((penalty(PenaltyCriterion::Bic, 3, 100) - 6.907755278982137).abs() < 1e-12);
        assert!((penalty(PenaltyCriterion::Mdl, 3, 100) - 9.907755278982137).abs() < 1e-12);
        assert_eq!(penalty(PenaltyCriterion::Bic, 4, 1), 0.0);
        assert_eq!(penalty(PenaltyCriterion::Mdl, 4, 1), 4.0);
    }

    #[test]
    fn mdl_cost_exceeds_bic_by_dim() {
        let data: Vec<f64> = (0..20).map(|k| 1.0 + 0.5 * k as f64).collect();
        let table = PrefixStats::new(&data);
        let t = ModelTemplate::linear();
        let (bic, m) = segment_cost(&table, 0, 20, &t, PenaltyCriterion::Bic, &cfg(1e-4)).unwrap();
        let (mdl, _) = segment_cost(&table, 0, 20, &t, PenaltyCriterion::Mdl, &cfg(1e-4)).unwrap();
        assert!((bic - (-m.loglik + 3.0 * 20f64.ln() / 2.0)).abs() < 1e-9);
        assert!((mdl - bic - 3.0).abs() < 1e-9);
        assert_eq!(m.interval, Some((0, 20)));
    }

    #[test]
    fn template_set_parsing() {
        let set: TemplateSet = "constant,linear".parse().unwrap();
        assert_eq!(set.len(), 2);
        assert!("constant,quadratic".parse::<TemplateSet>().is_err());
        assert!("".parse::<TemplateSet>().is_err());
        assert!("linear,linear".parse::<TemplateSet>().is_err());
        assert_eq!("MDL".parse::<PenaltyCriterion>().unwrap(), PenaltyCriterion::Mdl);
    }

    #[test]
    fn confidence_interval_contains_estimate() {
        let data: Vec<f64> = (0..30).map(|k| 2.0 - 0.3 * k as f64 + if k % 2 == 0 { 0.1 } else { -0.1 }).collect();
        let m = fit(&ModelTemplate::linear(), &data, &cfg(1e-6)).unwrap();
        let ci = m.confidence_intervals(0.95);
        assert!(ci[0].contains(m.intercept()) && ci[1].contains(m.slope()));
        assert!(ci[1].contains(-0.3));
        assert!(ci[1].hi - ci[1].lo > 0.0);
    }
}
