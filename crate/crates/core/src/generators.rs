//! Synthetic labeled traces with known ground truth: a lawnmower survey
//! pattern, random aircraft maneuvers, and a platformer jump model.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::automaton::{Flow, HybridAutomaton, ModeSpec, Transition, Update, FORMAT_TAG};
use crate::guards::Guard;
use crate::models::{Interval, ResetSemantics, DEFAULT_MIN_SEGMENT};
use crate::trace::{edges, PredicateKind, Trace, TraceError};

/// Timestep of the aircraft scenarios, in seconds.
pub const AIRCRAFT_DT: f64 = 0.1;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("malformed script at line {line}: {message}")]
    MalformedScript { line: usize, message: String },
    #[error("malformed labels at line {line}: {message}")]
    MalformedLabels { line: usize, message: String },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, GeneratorError>;

/// A generated trace with per-step ground-truth mode names and the
/// automaton that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrace {
    pub trace: Trace,
    pub labels: Vec<String>,
    pub truth: HybridAutomaton,
}

impl LabeledTrace {
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.trace.len() {
            return Err(GeneratorError::InvalidParameter(format!(
                "{} labels for {} steps",
                self.labels.len(),
                self.trace.len()
            )));
        }
        let names: BTreeSet<&str> = self.truth.modes.iter().map(|m| m.name.as_str()).collect();
        if let Some(l) = self.labels.iter().find(|l| !names.contains(l.as_str())) {
            return Err(GeneratorError::InvalidParameter(format!("label '{l}' is not a truth mode")));
        }
        Ok(())
    }
}

/// Writes `step,mode` rows.
pub fn write_labels<W: Write>(labels: &[String], mut sink: W) -> Result<()> {
    sink.write_all(labels_csv(labels).as_bytes())?;
    Ok(())
}

pub fn labels_csv(labels: &[String]) -> String {
    let mut out = String::from("step,mode\n");
    for (k, l) in labels.iter().enumerate() {
        let _ = writeln!(out, "{k},{l}");
    }
    out
}

/// Reads a labels file written by [`write_labels`]. Steps must be
/// consecutive from 0.
pub fn read_labels<R: Read>(source: R) -> Result<Vec<String>> {
    let mut labels = Vec::new();
    for (idx, line) in BufReader::new(source).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (idx == 0 && line.starts_with("step")) {
            continue;
        }
        let bad = |message: String| GeneratorError::MalformedLabels { line: idx + 1, message };
        let (step, mode) = line.split_once(',').ok_or_else(|| bad("expected 'step,mode'".into()))?;
        let step: usize = step.trim().parse().map_err(|_| bad(format!("bad step '{step}'")))?;
        if step != labels.len() {
            return Err(bad(format!("expected step {}, found {step}", labels.len())));
        }
        labels.push(mode.trim().to_string());
    }
    Ok(labels)
}

fn check_count(name: &str, value: usize, min: usize) -> Result<()> {
    if value < min {
        return Err(GeneratorError::InvalidParameter(format!("{name} = {value}, need at least {min}")));
    }
    Ok(())
}

fn check_nonneg(name: &str, value: f64) -> Result<()> {
    if !(value.is_finite() && value >= 0.0) {
        return Err(GeneratorError::InvalidParameter(format!("{name} = {value}, need a finite value >= 0")));
    }
    Ok(())
}

fn noise(sd: f64) -> Option<Normal<f64>> {
    (sd > 0.0).then(|| Normal::new(0.0, sd).expect("finite non-negative sd"))
}

/// Truth automaton for piecewise-constant heading rates; transitions are
/// the label changes seen in `labels` and carry no guard.
fn heading_rate_truth(rates: &[(&str, f64)], labels: &[String], dt: f64) -> HybridAutomaton {
    let modes = rates
        .iter()
        .map(|&(name, rate)| ModeSpec {
            name: name.to_string(),
            flow: Flow::Velocity(Interval::point(rate)),
            update: Update::None,
            update_semantics: ResetSemantics::Continuous,
            extremum: None,
        })
        .collect();
    let pairs: BTreeSet<(&str, &str)> = labels
        .windows(2)
        .filter(|w| w[0] != w[1])
        .map(|w| (w[0].as_str(), w[1].as_str()))
        .collect();
    let transitions = pairs
        .into_iter()
        .map(|(s, t)| Transition {
            source: s.to_string(),
            target: t.to_string(),
            guard: Guard::default(),
        })
        .collect();
    HybridAutomaton {
        format: FORMAT_TAG.to_string(),
        signal: "heading_rate".to_string(),
        dt,
        modes,
        transitions,
        initial: labels.first().cloned().unwrap_or_else(|| rates[0].0.to_string()),
    }
}

/// Builds the aircraft trace from true per-step heading rates.
fn aircraft_trace(rates: &[f64], speed: f64, noise_sd: f64, dt: f64, rng: &mut ChaCha8Rng) -> Result<Trace> {
    let dist = noise(noise_sd);
    let n = rates.len();
    let (mut x, mut y, mut heading) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut observed = Vec::with_capacity(n);
    for k in 0..n {
        if k > 0 {
            heading[k] = heading[k - 1] + rates[k] * dt;
            x[k] = x[k - 1] + speed * heading[k].cos() * dt;
            y[k] = y[k - 1] + speed * heading[k].sin() * dt;
        }
        let e = dist.as_ref().map_or(0.0, |d| d.sample(rng));
        observed.push(rates[k] + e);
    }
    Ok(Trace::new(dt, n)?
        .with_signal("heading_rate", observed)?
        .with_signal("x", x)?
        .with_signal("y", y)?
        .with_signal("heading", heading)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LawnmowerParams {
    pub leg_steps: usize,
    pub turn_steps: usize,
    /// Number of leg-plus-turn pairs; a final leg follows the last turn.
    pub repeats: usize,
    pub speed: f64,
    /// Heading rate during turns, in rad/s.
    pub turn_rate: f64,
    pub noise_sd: f64,
    pub dt: f64,
}

impl Default for LawnmowerParams {
    fn default() -> Self {
        let turn_steps = 30;
        Self {
            leg_steps: 90,
            turn_steps,
            repeats: 8,
            speed: 10.0,
            turn_rate: PI / (turn_steps as f64 * AIRCRAFT_DT),
            noise_sd: 0.05,
            dt: AIRCRAFT_DT,
        }
    }
}

/// Alternating straight legs and constant-rate reversal turns.
pub fn gen_lawnmower(p: &LawnmowerParams, seed: u64) -> Result<LabeledTrace> {
    check_count("leg_steps", p.leg_steps, DEFAULT_MIN_SEGMENT)?;
    check_count("turn_steps", p.turn_steps, DEFAULT_MIN_SEGMENT)?;
    check_count("repeats", p.repeats, 1)?;
    check_nonneg("noise_sd", p.noise_sd)?;
    check_nonneg("speed", p.speed)?;
    if !(p.dt.is_finite() && p.dt > 0.0 && p.turn_rate.is_finite()) {
        return Err(GeneratorError::InvalidParameter("dt and turn_rate must be finite, dt > 0".into()));
    }
    let mut rates = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..p.repeats {
        rates.extend(std::iter::repeat_n(0.0, p.leg_steps));
        labels.extend(std::iter::repeat_n("straight".to_string(), p.leg_steps));
        rates.extend(std::iter::repeat_n(p.turn_rate, p.turn_steps));
        labels.extend(std::iter::repeat_n("turn".to_string(), p.turn_steps));
    }
    rates.extend(std::iter::repeat_n(0.0, p.leg_steps));
    labels.extend(std::iter::repeat_n("straight".to_string(), p.leg_steps));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trace = aircraft_trace(&rates, p.speed, p.noise_sd, p.dt, &mut rng)?;
    let truth = heading_rate_truth(&[("straight", 0.0), ("turn", p.turn_rate)], &labels, p.dt);
    Ok(LabeledTrace { trace, labels, truth })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomManeuverParams {
    pub maneuver_steps: usize,
    pub count: usize,
    pub speed: f64,
    /// Magnitude of the left and right turn rates, in rad/s.
    pub turn_rate: f64,
    pub noise_sd: f64,
    pub dt: f64,
}

impl Default for RandomManeuverParams {
    fn default() -> Self {
        Self {
            maneuver_steps: 50,
            count: 17,
            speed: 10.0,
            turn_rate: PI / (30.0 * AIRCRAFT_DT),
            noise_sd: 0.05,
            dt: AIRCRAFT_DT,
        }
    }
}

/// A sequence of maneuvers drawn uniformly from straight, left, and right.
pub fn gen_random_maneuvers(p: &RandomManeuverParams, seed: u64) -> Result<LabeledTrace> {
    check_count("count", p.count, 1)?;
    check_count("maneuver_steps", p.maneuver_steps, DEFAULT_MIN_SEGMENT)?;
    check_nonneg("noise_sd", p.noise_sd)?;
    check_nonneg("speed", p.speed)?;
    if !(p.dt.is_finite() && p.dt > 0.0 && p.turn_rate.is_finite()) {
        return Err(GeneratorError::InvalidParameter("dt and turn_rate must be finite, dt > 0".into()));
    }
    let choices = [("straight", 0.0), ("left", p.turn_rate), ("right", -p.turn_rate)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rates = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..p.count {
        let (name, rate) = choices[rng.random_range(0..choices.len())];
        rates.extend(std::iter::repeat_n(rate, p.maneuver_steps));
        labels.extend(std::iter::repeat_n(name.to_string(), p.maneuver_steps));
    }
    let trace = aircraft_trace(&rates, p.speed, p.noise_sd, p.dt, &mut rng)?;
    let truth = heading_rate_truth(&choices, &labels, p.dt);
    Ok(LabeledTrace { trace, labels, truth })
}

/// Ascent parameters `(initial velocity, gravity)` of the three jumps.
pub const JUMP_VARIANTS: [(f64, f64); 3] = [(4.0, -1.0 / 8.0), (4.0, -31.0 / 256.0), (5.0, -5.0 / 32.0)];
/// Gravity while falling, per jump variant.
pub const FALL_GRAVITY: [f64; 3] = [-7.0 / 16.0, -3.0 / 8.0, -9.0 / 16.0];
pub const RELEASE_CAP: f64 = 3.0;
pub const TERMINAL_VELOCITY: f64 = -4.0;
pub const BOUNCE_VELOCITY: f64 = 4.0;
pub const SOFT_BUMP_BASE: f64 = 1.0;

/// Jump variant (0-based) for a horizontal speed.
pub fn speed_band(speed_x: f64) -> usize {
    let s = speed_x.abs();
    if s < 1.0 {
        0
    } else if s < 2.5 {
        1
    } else {
        2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    OnGround,
    Jump,
    Release,
    Fall,
    TerminalVelocity,
    Bump,
    SoftBump,
    Bounce,
}

impl Phase {
    pub const ALL: [Phase; 8] = [
        Phase::OnGround,
        Phase::Jump,
        Phase::Release,
        Phase::Fall,
        Phase::TerminalVelocity,
        Phase::Bump,
        Phase::SoftBump,
        Phase::Bounce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::OnGround => "OnGround",
            Phase::Jump => "Jump",
            Phase::Release => "Release",
            Phase::Fall => "Fall",
            Phase::TerminalVelocity => "TerminalVelocity",
            Phase::Bump => "Bump",
            Phase::SoftBump => "SoftBump",
            Phase::Bounce => "Bounce",
        }
    }

    fn airborne(self) -> bool {
        self != Phase::OnGround
    }
}

/// One of the 22 truth modes: a phase plus, except on the ground, the jump
/// variant it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MarioMode {
    pub phase: Phase,
    pub variant: usize,
}

impl MarioMode {
    pub const GROUND: MarioMode = MarioMode {
        phase: Phase::OnGround,
        variant: 0,
    };

    pub fn new(phase: Phase, variant: usize) -> Self {
        Self { phase, variant }
    }

    pub fn name(&self) -> String {
        match self.phase {
            Phase::OnGround => Phase::OnGround.name().to_string(),
            p => format!("{}{}", p.name(), self.variant + 1),
        }
    }

    pub fn all() -> Vec<MarioMode> {
        let mut out = vec![Self::GROUND];
        for phase in &Phase::ALL[1..] {
            out.extend((0..3).map(|v| Self::new(*phase, v)));
        }
        out
    }

    /// Gravity in effect in this mode; bounces carry the gravity of the
    /// mode they were entered from.
    fn gravity(&self, bounce_gravity: f64) -> f64 {
        match self.phase {
            Phase::OnGround => 0.0,
            Phase::Jump | Phase::Release | Phase::Bump | Phase::SoftBump => JUMP_VARIANTS[self.variant].1,
            Phase::Fall | Phase::TerminalVelocity => FALL_GRAVITY[self.variant],
            Phase::Bounce => bounce_gravity,
        }
    }
}

/// Strips the variant suffix from a truth mode name (`Fall2` → `Fall`).
pub fn mode_class(name: &str) -> &str {
    name.trim_end_matches(|c: char| c.is_ascii_digit())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Collision {
    /// Something hard and solid, from below.
    HardBlock,
    /// Something soft and solid, from below.
    SoftBlock,
    /// An enemy, from above.
    Enemy,
}

impl Collision {
    fn tag(self) -> &'static str {
        match self {
            Collision::HardBlock => "hard",
            Collision::SoftBlock => "soft",
            Collision::Enemy => "enemy",
        }
    }

    fn from_tag(s: &str) -> Option<Self> {
        match s {
            "hard" => Some(Collision::HardBlock),
            "soft" => Some(Collision::SoftBlock),
            "enemy" => Some(Collision::Enemy),
            _ => None,
        }
    }
}

/// Script input for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarioInput {
    /// A button held.
    pub a: bool,
    pub speed_x: f64,
    /// Collision offered by the level this frame. It only happens when the
    /// motion allows it (blocks while ascending, enemies while descending).
    pub event: Option<Collision>,
    /// Height of the ground below.
    pub floor: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MarioScript {
    pub steps: Vec<MarioInput>,
}

impl MarioScript {
    pub fn validate(&self) -> Result<()> {
        if self.steps.len() < 2 {
            return Err(GeneratorError::MalformedScript {
                line: 1,
                message: format!("{} step(s), need at least 2", self.steps.len()),
            });
        }
        for (k, s) in self.steps.iter().enumerate() {
            if !s.speed_x.is_finite() || !s.floor.is_finite() {
                return Err(GeneratorError::MalformedScript {
                    line: k + 2,
                    message: "non-finite speed or floor".into(),
                });
            }
        }
        Ok(())
    }

    /// CSV with header `a,speed_x,event,floor`; `event` is empty or one of
    /// `hard`, `soft`, `enemy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("a,speed_x,event,floor\n");
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                u8::from(s.a),
                s.speed_x,
                s.event.map_or("", Collision::tag),
                s.floor
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "a,speed_x,event,floor" => {}
            _ => {
                return Err(GeneratorError::MalformedScript {
                    line: 1,
                    message: "expected header 'a,speed_x,event,floor'".into(),
                })
            }
        }
        let mut steps = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| GeneratorError::MalformedScript { line: idx + 1, message };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let [a, speed, event, floor] = fields[..] else {
                return Err(bad(format!("expected 4 fields, found {}", fields.len())));
            };
            let a = match a {
                "0" => false,
                "1" => true,
                other => return Err(bad(format!("bad button state '{other}'"))),
            };
            let speed_x: f64 = speed.parse().map_err(|_| bad(format!("bad speed '{speed}'")))?;
            let floor: f64 = floor.parse().map_err(|_| bad(format!("bad floor '{floor}'")))?;
            let event = match event {
                "" => None,
                tag => Some(Collision::from_tag(tag).ok_or_else(|| bad(format!("bad event '{tag}'")))?),
            };
            steps.push(MarioInput {
                a,
                speed_x,
                event,
                floor,
            });
        }
        let script = Self { steps };
        script.validate()?;
        Ok(script)
    }
}

/// Exogenous facts observed at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct StepFacts {
    a_pressed: bool,
    a_released: bool,
    land: bool,
    bump_hard: bool,
    bump_soft: bool,
    stomp: bool,
}

/// The truth machine's continuous and discrete state.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Machine {
    mode: MarioMode,
    v: f64,
    y: f64,
    bounce_gravity: f64,
}

impl Machine {
    fn start(floor: f64) -> Self {
        Self {
            mode: MarioMode::GROUND,
            v: 0.0,
            y: floor,
            bounce_gravity: 0.0,
        }
    }

    /// Mode for the next step, decided from the facts and velocity of the
    /// current (last) step.
    fn next_mode(&self, facts: &StepFacts, speed_x: f64) -> (MarioMode, f64) {
        let MarioMode { phase, variant } = self.mode;
        let keep = (self.mode, self.bounce_gravity);
        let to = |p: Phase| (MarioMode::new(p, variant), self.bounce_gravity);
        if facts.land {
            return (MarioMode::GROUND, 0.0);
        }
        if facts.stomp {
            return (MarioMode::new(Phase::Bounce, variant), self.mode.gravity(self.bounce_gravity));
        }
        if facts.bump_hard {
            return to(Phase::Bump);
        }
        if facts.bump_soft {
            return to(Phase::SoftBump);
        }
        match phase {
            Phase::OnGround if facts.a_pressed => (MarioMode::new(Phase::Jump, speed_band(speed_x)), 0.0),
            Phase::Jump if facts.a_released && self.v > 0.0 => to(Phase::Release),
            Phase::Jump | Phase::Release | Phase::SoftBump if self.v <= 0.0 => to(Phase::Fall),
            Phase::Fall | Phase::Bounce if self.v <= TERMINAL_VELOCITY => to(Phase::TerminalVelocity),
            _ => keep,
        }
    }

    /// Velocity on the first step of `mode`, entered with velocity `v`.
    fn entry_velocity(mode: MarioMode, v: f64, bounce_gravity: f64) -> f64 {
        match mode.phase {
            Phase::OnGround => 0.0,
            Phase::Jump => JUMP_VARIANTS[mode.variant].0,
            Phase::Release => (v + mode.gravity(bounce_gravity)).min(RELEASE_CAP),
            Phase::Fall => v + mode.gravity(bounce_gravity),
            Phase::TerminalVelocity => TERMINAL_VELOCITY + v - v.floor(),
            Phase::Bump => 0.0,
            Phase::SoftBump => SOFT_BUMP_BASE + v - v.floor(),
            Phase::Bounce => BOUNCE_VELOCITY,
        }
    }

    fn flow_velocity(&self) -> f64 {
        match self.mode.phase {
            Phase::OnGround => 0.0,
            Phase::TerminalVelocity => TERMINAL_VELOCITY,
            _ => self.v + self.mode.gravity(self.bounce_gravity),
        }
    }

    /// Advances one step. Returns whether the step ended on the floor.
    fn advance(&mut self, facts: &StepFacts, speed_x: f64, floor: f64) -> bool {
        let (mode, g) = self.next_mode(facts, speed_x);
        let v = if mode != self.mode {
            Self::entry_velocity(mode, self.v, g)
        } else {
            self.flow_velocity()
        };
        self.mode = mode;
        self.bounce_gravity = g;
        if !mode.phase.airborne() {
            self.v = 0.0;
            return false;
        }
        let y = self.y + v;
        if v < 0.0 && y <= floor {
            self.v = floor - self.y;
            self.y = floor;
            true
        } else {
            self.v = v;
            self.y = y;
            false
        }
    }

    fn admits(&self, event: Collision) -> bool {
        match event {
            Collision::HardBlock | Collision::SoftBlock => {
                matches!(self.mode.phase, Phase::Jump | Phase::Release) && self.v > 0.0
            }
            Collision::Enemy => {
                matches!(
                    self.mode.phase,
                    Phase::Jump | Phase::Release | Phase::Fall | Phase::TerminalVelocity
                ) && self.v < 0.0
            }
        }
    }
}

/// The 22-mode truth automaton over the vertical velocity `vy`.
pub fn mario_truth() -> HybridAutomaton {
    let modes = MarioMode::all()
        .into_iter()
        .map(|m| {
            let g = m.gravity(0.0);
            let i = m.variant;
            let (flow, update, semantics) = match m.phase {
                Phase::OnGround => (Flow::Velocity(Interval::point(0.0)), Update::None, ResetSemantics::Continuous),
                Phase::Jump => (
                    Flow::Acceleration(Interval::point(g)),
                    Update::Set(Interval::point(JUMP_VARIANTS[i].0)),
                    ResetSemantics::Reset,
                ),
                Phase::Release => (
                    Flow::Acceleration(Interval::point(g)),
                    Update::ClampMax(RELEASE_CAP),
                    ResetSemantics::Continuous,
                ),
                Phase::Fall => (Flow::Acceleration(Interval::point(g)), Update::None, ResetSemantics::Continuous),
                Phase::TerminalVelocity => (
                    Flow::Velocity(Interval::point(TERMINAL_VELOCITY)),
                    Update::FractionalOffset(TERMINAL_VELOCITY),
                    ResetSemantics::Reset,
                ),
                Phase::Bump => (
                    Flow::Acceleration(Interval::point(g)),
                    Update::Set(Interval::point(0.0)),
                    ResetSemantics::Reset,
                ),
                Phase::SoftBump => (
                    Flow::Acceleration(Interval::point(g)),
                    Update::FractionalOffset(SOFT_BUMP_BASE),
                    ResetSemantics::Reset,
                ),
                Phase::Bounce => {
                    let (a, f) = (JUMP_VARIANTS[i].1, FALL_GRAVITY[i]);
                    (
                        Flow::Acceleration(Interval::new(a.min(f), a.max(f))),
                        Update::Set(Interval::point(BOUNCE_VELOCITY)),
                        ResetSemantics::Reset,
                    )
                }
            };
            ModeSpec {
                name: m.name(),
                flow,
                update,
                update_semantics: semantics,
                extremum: None,
            }
        })
        .collect();
    let guard = |preds: &[&str]| Guard {
        conjuncts: preds.iter().map(|p| p.to_string()).collect(),
        ..Default::default()
    };
    let mut transitions = Vec::new();
    let mut edge = |s: MarioMode, t: MarioMode, preds: &[&str]| {
        transitions.push(Transition {
            source: s.name(),
            target: t.name(),
            guard: guard(preds),
        })
    };
    let bands = ["speed_band1", "speed_band2", "speed_band3"];
    for (i, band) in bands.into_iter().enumerate() {
        let m = |p: Phase| MarioMode::new(p, i);
        edge(MarioMode::GROUND, m(Phase::Jump), &["a_pressed", band]);
        edge(m(Phase::Jump), m(Phase::Release), &["a_released"]);
        for src in [Phase::Jump, Phase::Release, Phase::SoftBump] {
            edge(m(src), m(Phase::Fall), &["vy_zc_down"]);
        }
        for src in [Phase::Fall, Phase::Bounce] {
            edge(m(src), m(Phase::TerminalVelocity), &["vy_terminal"]);
        }
        for src in [Phase::Jump, Phase::Release] {
            edge(m(src), m(Phase::Bump), &["bump_hard"]);
            edge(m(src), m(Phase::SoftBump), &["bump_soft"]);
        }
        for src in [Phase::Jump, Phase::Release, Phase::Fall, Phase::TerminalVelocity] {
            edge(m(src), m(Phase::Bounce), &["stomp"]);
        }
        for src in [Phase::Fall, Phase::TerminalVelocity, Phase::Bump, Phase::Bounce] {
            edge(m(src), MarioMode::GROUND, &["land"]);
        }
    }
    HybridAutomaton {
        format: FORMAT_TAG.to_string(),
        signal: "vy".to_string(),
        dt: 1.0,
        modes,
        transitions,
        initial: MarioMode::GROUND.name(),
    }
}

/// Runs the truth machine over a script.
///
/// The trace has signals `y` (optionally rounded to integers), `vy_true`,
/// `speed_x` and `floor`, and exogenous predicates `a`, `a_pressed`,
/// `a_released`, `land`, `bump_hard`, `bump_soft` and `stomp`. A mode
/// change decided from the facts of step `k` takes effect at `k + 1`.
pub fn gen_mario(script: &MarioScript, quantize: bool) -> Result<LabeledTrace> {
    script.validate()?;
    let n = script.steps.len();
    let a: Vec<bool> = script.steps.iter().map(|s| s.a).collect();
    let (pressed, released) = edges(&a);
    let mut machine = Machine::start(script.steps[0].floor);
    let mut facts = vec![StepFacts::default(); n];
    let (mut y, mut vy, mut labels) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (k, input) in script.steps.iter().enumerate() {
        if k > 0 {
            let prev = script.steps[k - 1];
            facts[k].land = machine.advance(&facts[k - 1], prev.speed_x, input.floor);
        }
        facts[k].a_pressed = pressed[k];
        facts[k].a_released = released[k];
        if let Some(ev) = input.event.filter(|&ev| !facts[k].land && machine.admits(ev)) {
            match ev {
                Collision::HardBlock => facts[k].bump_hard = true,
                Collision::SoftBlock => facts[k].bump_soft = true,
                Collision::Enemy => facts[k].stomp = true,
            }
        }
        y.push(machine.y);
        vy.push(machine.v);
        labels.push(machine.mode.name());
    }
    let observed_y = if quantize { y.iter().map(|v| v.round()).collect() } else { y };
    let column = |f: fn(&StepFacts) -> bool| facts.iter().map(f).collect::<Vec<_>>();
    let exo = PredicateKind::Exogenous;
    let trace = Trace::new(1.0, n)?
        .with_signal("y", observed_y)?
        .with_signal("vy_true", vy)?
        .with_signal("speed_x", script.steps.iter().map(|s| s.speed_x).collect())?
        .with_signal("floor", script.steps.iter().map(|s| s.floor).collect())?
        .with_predicate("a", exo, a)?
        .with_predicate("a_pressed", exo, pressed)?
        .with_predicate("a_released", exo, released)?
        .with_predicate("land", exo, column(|f| f.land))?
        .with_predicate("bump_hard", exo, column(|f| f.bump_hard))?
        .with_predicate("bump_soft", exo, column(|f| f.bump_soft))?
        .with_predicate("stomp", exo, column(|f| f.stomp))?;
    Ok(LabeledTrace {
        trace,
        labels,
        truth: mario_truth(),
    })
}

/// Output of [`replay_mario`].
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub y: Vec<f64>,
    pub vy: Vec<f64>,
    pub labels: Vec<String>,
}

/// Re-runs the truth machine from a generated trace's recorded facts
/// (button edges, collisions, speeds, floors) instead of its script.
pub fn replay_mario(trace: &Trace) -> Result<Replay> {
    let col = |name: &str| -> Result<&[bool]> { Ok(&trace.predicate(name)?.values) };
    let (pressed, released) = (col("a_pressed")?, col("a_released")?);
    let (land, hard, soft, stomp) = (col("land")?, col("bump_hard")?, col("bump_soft")?, col("stomp")?);
    let speed = trace.signal("speed_x")?;
    let floor = trace.signal("floor")?;
    let n = trace.len();
    let facts: Vec<StepFacts> = (0..n)
        .map(|k| StepFacts {
            a_pressed: pressed[k],
            a_released: released[k],
            land: land[k],
            bump_hard: hard[k],
            bump_soft: soft[k],
            stomp: stomp[k],
        })
        .collect();
    let mut machine = Machine::start(floor[0]);
    let mut out = Replay {
        y: Vec::with_capacity(n),
        vy: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
    };
    for k in 0..n {
        if k > 0 {
            machine.advance(&facts[k - 1], speed[k - 1], floor[k]);
        }
        out.y.push(machine.y);
        out.vy.push(machine.v);
        out.labels.push(machine.mode.name());
    }
    Ok(out)
}

/// Number of frames in the default script, roughly a minute of play.
pub const DEFAULT_MARIO_STEPS: usize = 3800;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Hold {
    /// Hold through the apex, release while falling.
    Full,
    /// Release after this many airborne frames.
    Hop(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Hazard {
    None,
    Block(Collision, usize),
    Enemy,
    Pit,
    Platform(f64),
}

/// Builds the default script: ground running interleaved with jumps of
/// all three variants, short hops, block bumps from below, enemy stomps,
/// pits and raised platforms.
pub fn default_mario_script(seed: u64) -> MarioScript {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut planner = Planner {
        steps: Vec::new(),
        machine: Machine::start(0.0),
        a_prev: false,
        pending: StepFacts::default(),
        prev_speed: 0.0,
        floor: 0.0,
    };
    let cycle = [
        (Hold::Full, Hazard::None),
        (Hold::Hop(1), Hazard::None),
        (Hold::Full, Hazard::Block(Collision::HardBlock, 6)),
        (Hold::Full, Hazard::Enemy),
        (Hold::Full, Hazard::Platform(24.0)),
        (Hold::Hop(2), Hazard::None),
        (Hold::Full, Hazard::Block(Collision::SoftBlock, 8)),
        (Hold::Full, Hazard::Pit),
        (Hold::Full, Hazard::Platform(-24.0)),
    ];
    let mut episode = 0usize;
    while planner.steps.len() < DEFAULT_MARIO_STEPS {
        let (hold, hazard) = cycle[episode % cycle.len()];
        let variant = (episode / cycle.len() + episode) % 3;
        let speed = match variant {
            0 => rng.random_range(0.2..0.9),
            1 => rng.random_range(1.2..2.3),
            _ => rng.random_range(2.7..3.6),
        };
        let hold = match hold {
            Hold::Hop(n) => Hold::Hop(n + rng.random_range(0..2)),
            h => h,
        };
        let hazard = match hazard {
            Hazard::Block(c, s) => Hazard::Block(c, s + rng.random_range(0..4)),
            h => h,
        };
        planner.ground(rng.random_range(12..40), speed);
        planner.jump(speed, hold, hazard, &mut rng);
        episode += 1;
    }
    planner.ground(20, 0.0);
    planner.steps.truncate(DEFAULT_MARIO_STEPS);
    MarioScript { steps: planner.steps }
}

/// Drives the truth machine while writing the script, so that hazards
/// are offered when they can take effect.
struct Planner {
    steps: Vec<MarioInput>,
    machine: Machine,
    a_prev: bool,
    pending: StepFacts,
    prev_speed: f64,
    floor: f64,
}

impl Planner {
    /// Floor for the next frame. When the next move would pass the
    /// nominal floor, the surface is placed exactly where the move ends, so
    /// landings cover a whole frame of motion.
    fn landing_floor(&self) -> f64 {
        if self.steps.is_empty() {
            return self.floor;
        }
        let mut probe = self.machine;
        probe.advance(&self.pending, self.prev_speed, f64::NEG_INFINITY);
        if probe.mode.phase.airborne() && probe.v < 0.0 && probe.y <= self.floor {
            probe.y
        } else {
            self.floor
        }
    }

    fn push(&mut self, a: bool, speed_x: f64, event: Option<Collision>) {
        let floor = self.landing_floor();
        let mut facts = StepFacts::default();
        if !self.steps.is_empty() {
            facts.land = self.machine.advance(&self.pending, self.prev_speed, floor);
        }
        facts.a_pressed = a && !self.a_prev && !self.steps.is_empty();
        facts.a_released = !a && self.a_prev;
        if let Some(ev) = event.filter(|&ev| !facts.land && self.machine.admits(ev)) {
            match ev {
                Collision::HardBlock => facts.bump_hard = true,
                Collision::SoftBlock => facts.bump_soft = true,
                Collision::Enemy => facts.stomp = true,
            }
        }
        self.steps.push(MarioInput {
            a,
            speed_x,
            event,
            floor,
        });
        self.pending = facts;
        self.a_prev = a;
        self.prev_speed = speed_x;
    }

    fn ground(&mut self, frames: usize, speed: f64) {
        for _ in 0..frames {
            self.push(false, speed, None);
        }
    }

    fn jump(&mut self, speed: f64, hold: Hold, hazard: Hazard, rng: &mut ChaCha8Rng) {
        // press; the jump starts on the next frame
        self.push(true, speed, None);
        let release_after_apex = rng.random_range(2..8);
        let mut a = true;
        let mut airborne = 0usize;
        let mut falling_frames = 0usize;
        let mut stomped = false;
        let mut platform_set = false;
        if hazard == Hazard::Pit {
            self.floor -= 160.0;
        }
        loop {
            let phase = self.machine.mode.phase;
            if airborne > 0 && phase == Phase::OnGround {
                break;
            }
            assert!(airborne < 1000, "planner episode does not land");
            airborne += 1;
            let descending = self.machine.v < 0.0;
            if descending {
                falling_frames += 1;
            }
            match hold {
                Hold::Hop(n) if airborne > n => a = false,
                Hold::Full if falling_frames > release_after_apex => a = false,
                _ => {}
            }
            let mut event = None;
            match hazard {
                Hazard::Block(c, s) if airborne == s => event = Some(c),
                Hazard::Enemy if !stomped && phase == Phase::Fall && self.machine.v < -1.5 => {
                    event = Some(Collision::Enemy);
                    stomped = true;
                }
                Hazard::Platform(h) if !platform_set => {
                    let target = self.floor + h;
                    if h < 0.0 || (descending && self.machine.y > target + 8.0) {
                        self.floor = target;
                        platform_set = true;
                    }
                }
                _ => {}
            }
            self.push(a, speed, event);
            if event == Some(Collision::Enemy) && self.pending.stomp {
                // the enemy stood on ground at Mario's height
                self.floor = self.machine.y;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lawnmower_square_wave() {
        let p = LawnmowerParams {
            repeats: 2,
            noise_sd: 0.0,
            ..Default::default()
        };
        let lt = gen_lawnmower(&p, 1).unwrap();
        lt.validate().unwrap();
        let hr = lt.trace.signal("heading_rate").unwrap();
        assert_eq!(hr.len(), 2 * (p.leg_steps + p.turn_steps) + p.leg_steps);
        for (v, l) in hr.iter().zip(&lt.labels) {
            let want = if l == "turn" { p.turn_rate } else { 0.0 };
            assert_eq!(*v, want);
        }
        assert!((p.turn_rate * p.turn_steps as f64 * p.dt - PI).abs() < 1e-12);
    }

    #[test]
    fn random_maneuvers_length_and_determinism() {
        let p = RandomManeuverParams::default();
        let a = gen_random_maneuvers(&p, 9).unwrap();
        let b = gen_random_maneuvers(&p, 9).unwrap();
        assert_eq!(a.trace.len(), 850);
        assert_eq!(a, b);
        a.validate().unwrap();
    }

    #[test]
    fn rejects_short_counts() {
        let p = LawnmowerParams {
            turn_steps: 2,
            ..Default::default()
        };
        assert!(gen_lawnmower(&p, 0).is_err());
    }

    fn flat_script(n: usize) -> Vec<MarioInput> {
        vec![
            MarioInput {
                a: false,
                speed_x: 0.5,
                event: None,
                floor: 0.0,
            };
            n
        ]
    }

    #[test]
    fn slow_jump_is_variant_one() {
        let mut steps = flat_script(60);
        for s in &mut steps[5..50] {
            s.a = true;
        }
        let lt = gen_mario(&MarioScript { steps }, false).unwrap();
        let vy = lt.trace.signal("vy_true").unwrap();
        assert_eq!(lt.labels[5], "OnGround");
        assert_eq!(lt.labels[6], "Jump1");
        assert_eq!(vy[6], 4.0);
        for k in 7..20 {
            assert_eq!(vy[k] - vy[k - 1], -1.0 / 8.0);
        }
    }

    #[test]
    fn release_clamps_in_jump3() {
        let mut steps = flat_script(80);
        for s in &mut steps {
            s.speed_x = 3.0;
        }
        for s in &mut steps[5..9] {
            s.a = true;
        }
        let lt = gen_mario(&MarioScript { steps }, false).unwrap();
        let vy = lt.trace.signal("vy_true").unwrap();
        let start = lt.labels.iter().position(|l| l == "Release3").unwrap();
        assert_eq!(vy[start], RELEASE_CAP);
        assert_eq!(vy[start + 1] - vy[start], -5.0 / 32.0);
    }

    #[test]
    fn long_fall_reaches_terminal_velocity() {
        let mut steps = flat_script(150);
        for s in &mut steps[5..50] {
            s.a = true;
        }
        for s in &mut steps[6..] {
            s.floor = -400.0;
        }
        let lt = gen_mario(&MarioScript { steps }, false).unwrap();
        let vy = lt.trace.signal("vy_true").unwrap();
        let first = lt.labels.iter().position(|l| l == "TerminalVelocity1").unwrap();
        let before = vy[first - 1];
        assert!(before <= TERMINAL_VELOCITY);
        assert_eq!(vy[first], TERMINAL_VELOCITY + before - before.floor());
        assert!(vy[first + 1..first + 10].iter().all(|&v| v == TERMINAL_VELOCITY));
    }

    #[test]
    fn default_script_replays_exactly() {
        let script = default_mario_script(0);
        assert_eq!(script.steps.len(), DEFAULT_MARIO_STEPS);
        let lt = gen_mario(&script, false).unwrap();
        lt.validate().unwrap();
        let replay = replay_mario(&lt.trace).unwrap();
        assert_eq!(replay.y, lt.trace.signal("y").unwrap());
        assert_eq!(replay.vy, lt.trace.signal("vy_true").unwrap());
        assert_eq!(replay.labels, lt.labels);
    }

    #[test]
    fn default_script_visits_every_phase() {
        let lt = gen_mario(&default_mario_script(0), false).unwrap();
        let classes: BTreeSet<&str> = lt.labels.iter().map(|l| mode_class(l)).collect();
        for p in Phase::ALL {
            assert!(classes.contains(p.name()), "missing {}", p.name());
        }
        let variants: BTreeSet<&str> = lt.labels.iter().filter(|l| l.starts_with("Jump")).map(String::as_str).collect();
        assert_eq!(variants.len(), 3);
    }

    #[test]
    fn script_csv_round_trip() {
        let script = default_mario_script(3);
        assert_eq!(MarioScript::parse(&script.to_csv()).unwrap(), script);
        assert!(MarioScript::parse("a,speed_x,event,floor\n1,0.5,boom,0\n0,0,,0\n").is_err());
    }

    #[test]
    fn labels_round_trip() {
        let labels: Vec<String> = ["a", "a", "b"].iter().map(|s| s.to_string()).collect();
        let text = labels_csv(&labels);
        assert_eq!(read_labels(text.as_bytes()).unwrap(), labels);
        assert!(read_labels("step,mode\n1,a\n".as_bytes()).is_err());
    }

    #[test]
    fn truth_has_22_modes() {
        let ha = mario_truth();
        assert_eq!(ha.modes.len(), 22);
        ha.validate().unwrap();
    }
}
