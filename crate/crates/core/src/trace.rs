//! Observation traces: fixed-timestep continuous signals plus boolean
//! predicate streams, and the preprocessing that derives velocities and
//! endogenous sign/zero-crossing predicates from them.
//!
//! The on-disk format is a small CSV dialect:
//!
//! ```text
//! # comment lines start with '#'
//! t,y,vy,btnA:exo,vy_sign_pos:endo
//! 0,0,0,0,0
//! 1,4,4,1,1
//! ```
//!
//! `t` is the time column, plain names are real-valued signals and
//! `name:exo` / `name:endo` columns are `0`/`1` predicates.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default seconds per step.
pub const DEFAULT_DT: f64 = 1.0 / 60.0;

/// Dead-band for sign predicates: `|v| <= EPS_SIGN` counts as zero.
pub const EPS_SIGN: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace too short: {len} step(s), need at least 2")]
    TooShort { len: usize },
    #[error("timestep must be positive and finite, got {0}")]
    BadTimestep(f64),
    #[error("column '{name}' has {got} values, expected {expected}")]
    LengthMismatch {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("duplicate column '{0}'")]
    Duplicate(String),
    #[error("unknown signal '{0}'")]
    MissingSignal(String),
    #[error("unknown predicate '{0}'")]
    MissingPredicate(String),
    #[error("non-finite value at row {row} (column '{column}')")]
    NonFinite { row: usize, column: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: expected {expected} columns, found {got}")]
    ColumnCount {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("time column is not strictly increasing at row {row}")]
    NonMonotoneTime { row: usize },
    #[error("time column is not evenly spaced at row {row}")]
    IrregularTime { row: usize },
    #[error("unknown predicate kind '{kind}' in column '{column}' (expected exo or endo)")]
    UnknownKind { column: String, kind: String },
    #[error("header has no 't' column")]
    MissingTime,
    #[error("header has no signal column")]
    NoSignals,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Whether the tracked entity can cause a predicate's truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredicateKind {
    /// Control inputs and collisions: causal direction known.
    Exogenous,
    /// Facts about the entity's own state.
    Endogenous,
}

impl PredicateKind {
    pub fn tag(self) -> &'static str {
        match self {
            PredicateKind::Exogenous => "exo",
            PredicateKind::Endogenous => "endo",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "exo" => Some(PredicateKind::Exogenous),
            "endo" => Some(PredicateKind::Endogenous),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub kind: PredicateKind,
    pub values: Vec<bool>,
}

/// An immutable, validated observation trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    dt: f64,
    len: usize,
    signals: IndexMap<String, Vec<f64>>,
    predicates: IndexMap<String, Predicate>,
}

impl Trace {
    /// An empty trace of `len` steps; add columns with [`Trace::with_signal`]
    /// and [`Trace::with_predicate`].
    pub fn new(dt: f64, len: usize) -> Result<Self, TraceError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(TraceError::BadTimestep(dt));
        }
        if len < 2 {
            return Err(TraceError::TooShort { len });
        }
        Ok(Self {
            dt,
            len,
            signals: IndexMap::new(),
            predicates: IndexMap::new(),
        })
    }

    pub fn with_signal(mut self, name: impl Into<String>, values: Vec<f64>) -> Result<Self, TraceError> {
        let name = name.into();
        self.check_new_column(&name, values.len())?;
        if let Some(row) = values.iter().position(|v| !v.is_finite()) {
            return Err(TraceError::NonFinite { row, column: name });
        }
        self.signals.insert(name, values);
        Ok(self)
    }

    pub fn with_predicate(
        mut self,
        name: impl Into<String>,
        kind: PredicateKind,
        values: Vec<bool>,
    ) -> Result<Self, TraceError> {
        let name = name.into();
        self.check_new_column(&name, values.len())?;
        self.predicates.insert(name, Predicate { kind, values });
        Ok(self)
    }

    fn check_new_column(&self, name: &str, got: usize) -> Result<(), TraceError> {
        if name == "t" || self.signals.contains_key(name) || self.predicates.contains_key(name) {
            return Err(TraceError::Duplicate(name.to_string()));
        }
        if got != self.len {
            return Err(TraceError::LengthMismatch {
                name: name.to_string(),
                expected: self.len,
                got,
            });
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn signals(&self) -> &IndexMap<String, Vec<f64>> {
        &self.signals
    }

    pub fn predicates(&self) -> &IndexMap<String, Predicate> {
        &self.predicates
    }

    pub fn signal(&self, name: &str) -> Result<&[f64], TraceError> {
        self.signals
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| TraceError::MissingSignal(name.to_string()))
    }

    pub fn predicate(&self, name: &str) -> Result<&Predicate, TraceError> {
        self.predicates
            .get(name)
            .ok_or_else(|| TraceError::MissingPredicate(name.to_string()))
    }

    /// Only the exogenous predicate columns, in file order.
    pub fn exogenous(&self) -> impl Iterator<Item = (&str, &[bool])> {
        self.predicates
            .iter()
            .filter(|(_, p)| p.kind == PredicateKind::Exogenous)
            .map(|(n, p)| (n.as_str(), p.values.as_slice()))
    }

    /// Adds `out` as the backward difference of `base` divided by `dt`,
    /// with `out[0]` copied from `out[1]`.
    pub fn derive_signal(&self, base: &str, out: &str) -> Result<Trace, TraceError> {
        let values = backward_difference(self.signal(base)?, self.dt);
        self.clone().with_signal(out, values)
    }

    /// Adds the endogenous zero-crossing, velocity-sign and
    /// acceleration-sign predicates for `signal` using [`EPS_SIGN`].
    pub fn compute_endogenous_predicates(&self, signal: &str) -> Result<Trace, TraceError> {
        self.compute_endogenous_predicates_with(signal, EPS_SIGN)
    }

    pub fn compute_endogenous_predicates_with(&self, signal: &str, eps: f64) -> Result<Trace, TraceError> {
        let v = self.signal(signal)?;
        let acc = backward_difference(v, self.dt);
        let mut out = self.clone();
        for (suffix, values) in sign_predicates(v, &acc, eps) {
            out = out.with_predicate(format!("{signal}_{suffix}"), PredicateKind::Endogenous, values)?;
        }
        Ok(out)
    }

    /// Adds `<control>_pressed` and `<control>_released` as the rising and
    /// falling edges of a boolean control column. Step 0 is never an edge.
    pub fn with_edge_predicates(&self, control: &str) -> Result<Trace, TraceError> {
        let p = self.predicate(control)?;
        let (pressed, released) = edges(&p.values);
        let kind = p.kind;
        self.clone()
            .with_predicate(format!("{control}_pressed"), kind, pressed)?
            .with_predicate(format!("{control}_released"), kind, released)
    }

    /// Reads the CSV dialect described in the module docs.
    pub fn load<R: Read>(source: R) -> Result<Trace, TraceError> {
        let reader = BufReader::new(source);
        let mut header: Option<Vec<Column>> = None;
        let mut time = Vec::new();
        let mut cols: Vec<Vec<String>> = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let cells: Vec<&str> = trimmed.split(',').map(str::trim).collect();
            match &header {
                None => {
                    let parsed = parse_header(&cells)?;
                    cols = vec![Vec::new(); parsed.len()];
                    header = Some(parsed);
                }
                Some(h) => {
                    if cells.len() != h.len() {
                        return Err(TraceError::ColumnCount {
                            line: lineno,
                            expected: h.len(),
                            got: cells.len(),
                        });
                    }
                    for (c, cell) in cells.iter().enumerate() {
                        if matches!(h[c], Column::Time) {
                            let t: f64 = cell.parse().map_err(|_| TraceError::Parse {
                                line: lineno,
                                msg: format!("bad time value '{cell}'"),
                            })?;
                            if !t.is_finite() {
                                return Err(TraceError::NonFinite {
                                    row: time.len(),
                                    column: "t".into(),
                                });
                            }
                            time.push(t);
                        }
                        cols[c].push((*cell).to_string());
                    }
                }
            }
        }
        let Some(header) = header else {
            return Err(TraceError::TooShort { len: 0 });
        };
        let n = time.len();
        if n < 2 {
            return Err(TraceError::TooShort { len: n });
        }
        let dt = time[1] - time[0];
        for k in 1..n {
            let step = time[k] - time[k - 1];
            if step <= 0.0 {
                return Err(TraceError::NonMonotoneTime { row: k });
            }
            if (step - dt).abs() > 1e-6 * dt.abs().max(1e-12) {
                return Err(TraceError::IrregularTime { row: k });
            }
        }
        let mut trace = Trace::new(dt, n)?;
        for (column, raw) in header.into_iter().zip(cols) {
            match column {
                Column::Time => {}
                Column::Signal(name) => {
                    let mut values = Vec::with_capacity(n);
                    for (row, cell) in raw.iter().enumerate() {
                        let v: f64 = cell.parse().map_err(|_| TraceError::Parse {
                            line: row + 1,
                            msg: format!("bad value '{cell}' in column '{name}'"),
                        })?;
                        if !v.is_finite() {
                            return Err(TraceError::NonFinite { row, column: name });
                        }
                        values.push(v);
                    }
                    trace = trace.with_signal(name, values)?;
                }
                Column::Predicate(name, kind) => {
                    let mut values = Vec::with_capacity(n);
                    for (row, cell) in raw.iter().enumerate() {
                        values.push(match cell.as_str() {
                            "0" => false,
                            "1" => true,
                            other => {
                                return Err(TraceError::Parse {
                                    line: row + 1,
                                    msg: format!("predicate '{name}' must be 0 or 1, got '{other}'"),
                                })
                            }
                        });
                    }
                    trace = trace.with_predicate(name, kind, values)?;
                }
            }
        }
        if trace.signals.is_empty() {
            return Err(TraceError::NoSignals);
        }
        Ok(trace)
    }

    /// Writes the trace with `t = k * dt`; `load(save(x)) == x`.
    pub fn save<W: Write>(&self, mut sink: W) -> Result<(), TraceError> {
        sink.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push('t');
        for name in self.signals.keys() {
            out.push(',');
            out.push_str(name);
        }
        for (name, p) in &self.predicates {
            let _ = write!(out, ",{name}:{}", p.kind.tag());
        }
        out.push('\n');
        for k in 0..self.len {
            let _ = write!(out, "{}", k as f64 * self.dt);
            for values in self.signals.values() {
                let _ = write!(out, ",{}", values[k]);
            }
            for p in self.predicates.values() {
                out.push_str(if p.values[k] { ",1" } else { ",0" });
            }
            out.push('\n');
        }
        out
    }
}

enum Column {
    Time,
    Signal(String),
    Predicate(String, PredicateKind),
}

fn parse_header(cells: &[&str]) -> Result<Vec<Column>, TraceError> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(cells.len());
    for cell in cells {
        let (name, column) = match cell.split_once(':') {
            Some((name, tag)) => {
                let kind = PredicateKind::from_tag(tag).ok_or_else(|| TraceError::UnknownKind {
                    column: name.to_string(),
                    kind: tag.to_string(),
                })?;
                (name, Column::Predicate(name.to_string(), kind))
            }
            None if *cell == "t" => ("t", Column::Time),
            None => (*cell, Column::Signal(cell.to_string())),
        };
        if name.is_empty() {
            return Err(TraceError::Parse {
                line: 1,
                msg: "empty column name".into(),
            });
        }
        if !seen.insert(name.to_string()) {
            return Err(TraceError::Duplicate(name.to_string()));
        }
        out.push(column);
    }
    if !out.iter().any(|c| matches!(c, Column::Time)) {
        return Err(TraceError::MissingTime);
    }
    Ok(out)
}

/// Backward difference `(x[k] - x[k-1]) / dt`, first entry copied from the second.
pub fn backward_difference(x: &[f64], dt: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for k in 1..x.len() {
        out[k] = (x[k] - x[k - 1]) / dt;
    }
    if x.len() >= 2 {
        out[0] = out[1];
    }
    out
}

/// Sign of `v` with a dead-band: -1, 0 or +1.
pub fn dead_band_sign(v: f64, eps: f64) -> i8 {
    if v > eps {
        1
    } else if v < -eps {
        -1
    } else {
        0
    }
}

fn sign_predicates(v: &[f64], acc: &[f64], eps: f64) -> Vec<(&'static str, Vec<bool>)> {
    let n = v.len();
    let mut zc_down = vec![false; n];
    let mut zc_up = vec![false; n];
    for k in 1..n {
        // + to <= 0, and - to >= 0
        zc_down[k] = v[k - 1] > eps && v[k] <= eps;
        zc_up[k] = v[k - 1] < -eps && v[k] >= -eps;
    }
    let signs = |xs: &[f64], s: i8| xs.iter().map(|&x| dead_band_sign(x, eps) == s).collect::<Vec<_>>();
    vec![
        ("zc_down", zc_down),
        ("zc_up", zc_up),
        ("sign_neg", signs(v, -1)),
        ("sign_zero", signs(v, 0)),
        ("sign_pos", signs(v, 1)),
        ("acc_neg", signs(acc, -1)),
        ("acc_zero", signs(acc, 0)),
        ("acc_pos", signs(acc, 1)),
    ]
}

/// Rising and falling edges of a boolean stream.
pub fn edges(values: &[bool]) -> (Vec<bool>, Vec<bool>) {
    let mut rising = vec![false; values.len()];
    let mut falling = vec![false; values.len()];
    for k in 1..values.len() {
        rising[k] = values[k] && !values[k - 1];
        falling[k] = !values[k] && values[k - 1];
    }
    (rising, falling)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple(values: Vec<f64>) -> Trace {
        Trace::new(1.0, values.len()).unwrap().with_signal("y", values).unwrap()
    }

    #[test]
    fn loads_three_rows() {
        let src = "t,y,btnA:exo\n0,0,0\n1,1.5,1\n2,2,0\n";
        let tr = Trace::load(src.as_bytes()).unwrap();
        assert_eq!(tr.len(), 3);
        assert_eq!(tr.signal("y").unwrap(), &[0.0, 1.5, 2.0]);
        let p = tr.predicate("btnA").unwrap();
        assert_eq!(p.kind, PredicateKind::Exogenous);
        assert_eq!(p.values, vec![false, true, false]);
        assert_eq!(tr.dt(), 1.0);
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let src = "# generated\n\nt,y\n# mid\n0,1\n0.5,2\n";
        let tr = Trace::load(src.as_bytes()).unwrap();
        assert_eq!(tr.len(), 2);
        assert_eq!(tr.dt(), 0.5);
    }

    #[test]
    fn rejects_nan() {
        let src = "t,y\n0,1\n1,NaN\n2,3\n";
        let err = Trace::load(src.as_bytes()).unwrap_err();
        assert_eq!(err.to_string(), "non-finite value at row 1 (column 'y')");
    }

    #[test]
    fn rejects_bad_inputs() {
        let cases = [
            ("t,y\n0,1\n1,2,3\n", "expected 2 columns"),
            ("t,y\n0,1\n0,2\n", "not strictly increasing"),
            ("t,y\n0,1\n1,2\n3,3\n", "not evenly spaced"),
            ("t,y,b:maybe\n0,1,0\n1,2,1\n", "unknown predicate kind"),
            ("t,y,b:exo\n0,1,0\n1,2,2\n", "must be 0 or 1"),
            ("y\n1\n2\n", "no 't' column"),
            ("t,y\n0,abc\n1,2\n", "bad value"),
            ("t,b:exo\n0,1\n1,0\n", "no signal column"),
            ("", "trace too short"),
            ("t,y\n0,1\n", "trace too short"),
        ];
        for (src, needle) in cases {
            let err = Trace::load(src.as_bytes()).unwrap_err().to_string();
            assert!(err.contains(needle), "{src:?}: {err}");
        }
    }

    #[test]
    fn derive_constant_slope() {
        let tr = simple(vec![0.0, 1.0, 2.0, 3.0]).derive_signal("y", "vy").unwrap();
        assert_eq!(tr.signal("vy").unwrap(), &[1.0, 1.0, 1.0, 1.0]);
        let tr = simple(vec![0.0, 0.0, 0.0]).derive_signal("y", "vy").unwrap();
        assert_eq!(tr.signal("vy").unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn derive_errors() {
        let tr = simple(vec![0.0, 1.0]);
        assert!(matches!(tr.derive_signal("x", "vx"), Err(TraceError::MissingSignal(_))));
        assert!(matches!(tr.derive_signal("y", "y"), Err(TraceError::Duplicate(_))));
    }

    #[test]
    fn zero_crossing_down_at_index_two() {
        let tr = Trace::new(1.0, 4)
            .unwrap()
            .with_signal("vy", vec![2.0, 1.0, 0.0, -1.0])
            .unwrap()
            .compute_endogenous_predicates("vy")
            .unwrap();
        let zc = &tr.predicate("vy_zc_down").unwrap().values;
        assert_eq!(zc, &vec![false, false, true, false]);
        assert!(tr.predicate("vy_zc_up").unwrap().values.iter().all(|b| !b));
        assert_eq!(tr.predicate("vy_acc_neg").unwrap().kind, PredicateKind::Endogenous);
    }

    #[test]
    fn negative_velocity_signs() {
        let tr = Trace::new(1.0, 2)
            .unwrap()
            .with_signal("vy", vec![-1.0, -1.0])
            .unwrap()
            .compute_endogenous_predicates("vy")
            .unwrap();
        assert_eq!(tr.predicate("vy_sign_neg").unwrap().values, vec![true, true]);
        assert_eq!(tr.predicate("vy_sign_pos").unwrap().values, vec![false, false]);
        assert_eq!(tr.predicate("vy_acc_zero").unwrap().values, vec![true, true]);
    }

    #[test]
    fn edge_predicates() {
        let tr = Trace::new(1.0, 5)
            .unwrap()
            .with_signal("y", vec![0.0; 5])
            .unwrap()
            .with_predicate("a", PredicateKind::Exogenous, vec![true, true, false, true, true])
            .unwrap()
            .with_edge_predicates("a")
            .unwrap();
        assert_eq!(tr.predicate("a_pressed").unwrap().values, vec![false, false, false, true, false]);
        assert_eq!(tr.predicate("a_released").unwrap().values, vec![false, false, true, false, false]);
    }

    #[test]
    fn constructor_invariants() {
        assert!(matches!(Trace::new(0.0, 3), Err(TraceError::BadTimestep(_))));
        assert!(matches!(Trace::new(1.0, 1), Err(TraceError::TooShort { len: 1 })));
        let err = Trace::new(1.0, 3).unwrap().with_signal("y", vec![1.0]).unwrap_err();
        assert!(matches!(err, TraceError::LengthMismatch { .. }));
    }
}
