//! `ha-learn`: generate traces, learn hybrid automata, simulate, evaluate
//! and export them.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use ha_learn::automaton::{export, exogenous_stream, import, mae, simulate, EvalReport, ExportFormat, SimConfig, SimState};
use ha_learn::generators::{
    default_mario_script, gen_lawnmower, gen_mario, gen_random_maneuvers, labels_csv, read_labels, LabeledTrace,
    LawnmowerParams, MarioScript, RandomManeuverParams,
};
use ha_learn::guards::GuardConfig;
use ha_learn::models::{FitConfig, PenaltyCriterion, TemplateSet};
use ha_learn::pipeline::{learn, run_trials, trimmed_mean, LearnConfig, Scenario};
use ha_learn::segmentation::SegmentationConfig;
use ha_learn::trace::Trace;

#[derive(Parser, Debug)]
#[command(name = "ha-learn", version, about = "Learn hybrid automata from traces")]
struct Cli {
    /// Worker threads (0 picks the number of cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a generated trace, its labels and the truth automaton.
    Gen(GenArgs),
    /// Learn an automaton from a trace.
    Learn(LearnArgs),
    /// Run an automaton against a trace's exogenous inputs.
    Simulate(SimulateArgs),
    /// Score predicted labels, or a batch of generated trials.
    Eval(EvalArgs),
    /// Render an automaton as graph text or structured text.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    scenario: Scenario,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Round platformer positions to whole units.
    #[arg(long)]
    quantize: bool,
    /// Heading-rate noise for the aircraft scenarios.
    #[arg(long)]
    noise_sd: Option<f64>,
    /// Platformer input script instead of the seeded default level.
    #[arg(long)]
    script: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    #[arg(long, default_value = "bic")]
    penalty: PenaltyCriterion,
    #[arg(long, default_value = "constant,linear")]
    templates: TemplateSet,
    #[arg(long)]
    sigma2_floor: Option<f64>,
    #[arg(long)]
    min_segment: Option<usize>,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long)]
    theta_universal: Option<f64>,
    #[arg(long)]
    theta_relevant: Option<f64>,
    #[arg(long, default_value_t = 0)]
    guard_window: usize,
    #[arg(long)]
    eps_ext: Option<f64>,
}

#[derive(Args, Debug)]
struct LearnArgs {
    #[arg(long, default_value = "trace.csv")]
    trace: PathBuf,
    /// Signal to segment; defaults to the derived signal or the first one.
    #[arg(long)]
    signal: Option<String>,
    /// Add `out` as the backward difference of `base`.
    #[arg(long, value_name = "OUT=BASE")]
    derive: Option<String>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value = "automaton.json")]
    automaton: PathBuf,
    #[arg(long, default_value = "trace.csv")]
    trace: PathBuf,
    #[arg(long, value_name = "OUT=BASE")]
    derive: Option<String>,
    /// Reference column for the MAE; defaults to the automaton's signal.
    #[arg(long)]
    compare: Option<String>,
    #[arg(long)]
    eps_ext: Option<f64>,
    #[arg(long, default_value = "simulated.csv")]
    out: PathBuf,
    /// Write `observed.csv` and `simulated.csv` step/value series here.
    #[arg(long)]
    emit_plot: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, default_value = "labels.csv")]
    truth: PathBuf,
    #[arg(long, default_value = "predicted.csv")]
    predicted: PathBuf,
    /// Run generated trials instead of reading label files.
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long, default_value_t = 30)]
    trials: usize,
    #[arg(long)]
    trim_extremes: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long, default_value = "automaton.json")]
    automaton: PathBuf,
    #[arg(long, default_value = "graph")]
    format: ExportFormat,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Validated learning settings.
#[derive(Debug, Clone, PartialEq)]
struct RunConfig {
    learn: LearnConfig,
}

impl RunConfig {
    fn from_args(a: &ConfigArgs) -> Result<Self> {
        let mut fit = FitConfig::default();
        if let Some(f) = a.sigma2_floor {
            fit.sigma2_floor = f;
        }
        if let Some(m) = a.min_segment {
            fit.min_segment = m;
        }
        let mut guard = GuardConfig {
            window: a.guard_window,
            ..GuardConfig::default()
        };
        if let Some(t) = a.theta_universal {
            guard.theta_universal = t;
        }
        if let Some(t) = a.theta_relevant {
            guard.theta_relevant = t;
        }
        if let Some(e) = a.eps_ext {
            guard.eps_ext = e;
        }
        let cfg = RunConfig {
            learn: LearnConfig {
                segmentation: SegmentationConfig {
                    criterion: a.penalty,
                    templates: a.templates.clone(),
                    fit,
                    stride: a.stride,
                },
                guard,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let seg = &self.learn.segmentation;
        ensure!(
            seg.fit.sigma2_floor.is_finite() && seg.fit.sigma2_floor > 0.0,
            "sigma2-floor must be positive and finite"
        );
        ensure!(seg.fit.min_segment >= 1, "min-segment must be at least 1");
        ensure!(seg.stride >= 1, "stride must be at least 1");
        let g = &self.learn.guard;
        ensure!(g.eps_ext.is_finite() && g.eps_ext >= 0.0, "eps-ext must be non-negative");
        g.validate()?;
        Ok(())
    }
}

fn parse_derive(spec: &str) -> Result<(String, String)> {
    let (out, base) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("--derive expects OUT=BASE, got '{spec}'"))?;
    ensure!(!out.is_empty() && !base.is_empty(), "--derive expects OUT=BASE, got '{spec}'");
    Ok((out.to_string(), base.to_string()))
}

fn load_trace(path: &Path, derive: Option<&(String, String)>) -> Result<Trace> {
    let file = fs::File::open(path).with_context(|| format!("cannot open trace {}", path.display()))?;
    let trace = Trace::load(file).with_context(|| format!("cannot read trace {}", path.display()))?;
    match derive {
        Some((out, base)) => Ok(trace.derive_signal(base, out)?),
        None => Ok(trace),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write_labeled(dir: &Path, lt: &LabeledTrace) -> Result<()> {
    create_dir(dir)?;
    write_file(dir, "trace.csv", &lt.trace.to_csv())?;
    write_file(dir, "labels.csv", &labels_csv(&lt.labels))?;
    write_file(dir, "truth.json", &export(&lt.truth, ExportFormat::Structured)?)
}

fn run_gen(a: &GenArgs) -> Result<()> {
    if let Some(sd) = a.noise_sd {
        ensure!(sd.is_finite() && sd >= 0.0, "noise-sd must be non-negative");
        ensure!(a.scenario != Scenario::Mario, "--noise-sd applies to lawnmower and random only");
    }
    ensure!(
        a.script.is_none() || a.scenario == Scenario::Mario,
        "--script applies to mario only"
    );
    ensure!(!a.quantize || a.scenario == Scenario::Mario, "--quantize applies to mario only");
    let lt = match a.scenario {
        Scenario::Lawnmower => {
            let mut p = LawnmowerParams::default();
            if let Some(sd) = a.noise_sd {
                p.noise_sd = sd;
            }
            gen_lawnmower(&p, a.seed)?
        }
        Scenario::Random => {
            let mut p = RandomManeuverParams::default();
            if let Some(sd) = a.noise_sd {
                p.noise_sd = sd;
            }
            gen_random_maneuvers(&p, a.seed)?
        }
        Scenario::Mario => {
            let script = match &a.script {
                Some(path) => MarioScript::parse(&read_text(path)?)?,
                None => default_mario_script(a.seed),
            };
            let lt = gen_mario(&script, a.quantize)?;
            create_dir(&a.out)?;
            write_file(&a.out, "script.csv", &script.to_csv())?;
            lt
        }
    };
    write_labeled(&a.out, &lt)?;
    eprintln!("wrote {} steps to {}", lt.trace.len(), a.out.display());
    Ok(())
}

fn run_learn(a: &LearnArgs) -> Result<()> {
    let cfg = RunConfig::from_args(&a.config)?;
    let derive = a.derive.as_deref().map(parse_derive).transpose()?;
    let trace = load_trace(&a.trace, derive.as_ref())?;
    let signal = match (&a.signal, &derive) {
        (Some(s), _) => s.clone(),
        (None, Some((out, _))) => out.clone(),
        (None, None) => trace
            .signals()
            .keys()
            .next()
            .cloned()
            .ok_or_else(|| anyhow!("trace has no signal"))?,
    };
    let learned = learn(&trace, &signal, &cfg.learn)?;
    create_dir(&a.out)?;
    let mut seg = learned.segmentation.report();
    seg.push('\n');
    seg.push_str(&learned.modes().report());
    write_file(&a.out, "segmentation.txt", &seg)?;
    write_file(&a.out, "guards.txt", &learned.guard_report())?;
    write_file(&a.out, "automaton.json", &export(&learned.automaton, ExportFormat::Structured)?)?;
    write_file(&a.out, "predicted.csv", &labels_csv(&learned.labels()))?;
    eprintln!(
        "learned {} mode(s), {} transition(s) from {} steps",
        learned.automaton.modes.len(),
        learned.automaton.transitions.len(),
        trace.len()
    );
    Ok(())
}

fn series_csv(values: &[f64]) -> String {
    let mut out = String::from("step,value\n");
    for (k, v) in values.iter().enumerate() {
        out.push_str(&format!("{k},{v}\n"));
    }
    out
}

fn run_simulate(a: &SimulateArgs) -> Result<()> {
    let mut sim_cfg = SimConfig::default();
    if let Some(e) = a.eps_ext {
        ensure!(e.is_finite() && e >= 0.0, "eps-ext must be non-negative");
        sim_cfg.eps_ext = e;
    }
    let ha = import(&read_text(&a.automaton)?).context("invalid automaton")?;
    let derive = a.derive.as_deref().map(parse_derive).transpose()?;
    let trace = load_trace(&a.trace, derive.as_ref())?;
    let compare = a.compare.clone().unwrap_or_else(|| ha.signal.clone());
    let reference = trace.signal(&compare)?;
    let start = trace.signal(&ha.signal).unwrap_or(reference)[0];
    let initial = SimState {
        mode: ha.initial.clone(),
        value: start,
    };
    let sim = simulate(&ha, &exogenous_stream(&trace), trace.len(), &initial, &sim_cfg)?;
    let err = mae(&sim.values, reference)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(&a.out, sim.to_trace(&ha)?.to_csv()).with_context(|| format!("cannot write {}", a.out.display()))?;
    if let Some(dir) = &a.emit_plot {
        create_dir(dir)?;
        write_file(dir, "observed.csv", &series_csv(reference))?;
        write_file(dir, "simulated.csv", &series_csv(&sim.values))?;
    }
    println!("mae {err:.4}");
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let report = match a.scenario {
        Some(scenario) => {
            let cfg = RunConfig::from_args(&a.config)?;
            ensure!(a.trials >= 1, "trials must be at least 1");
            let errors = run_trials(scenario, a.trials, a.seed, &cfg.learn)?;
            let mut out = String::new();
            for (i, e) in errors.iter().enumerate() {
                out.push_str(&format!("trial {} seed {} attribution_error {e:.4}\n", i, a.seed.wrapping_add(i as u64)));
            }
            let mean = trimmed_mean(&errors, a.trim_extremes);
            out.push_str(&format!("attribution_error {mean:.4}\n"));
            out
        }
        None => {
            let truth = read_labels(fs::File::open(&a.truth).with_context(|| format!("cannot open {}", a.truth.display()))?)?;
            let predicted = read_labels(
                fs::File::open(&a.predicted).with_context(|| format!("cannot open {}", a.predicted.display()))?,
            )?;
            EvalReport::from_labels(&predicted, &truth, None)?.render()
        }
    };
    if let Some(path) = &a.out {
        fs::write(path, &report).with_context(|| format!("cannot write {}", path.display()))?;
    }
    print!("{report}");
    Ok(())
}

fn run_export(a: &ExportArgs) -> Result<()> {
    let ha = import(&read_text(&a.automaton)?).context("invalid automaton")?;
    let text = export(&ha, a.format)?;
    match &a.out {
        Some(path) => fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .context("cannot start worker threads")?;
    pool.install(|| match &cli.command {
        Command::Gen(a) => run_gen(a),
        Command::Learn(a) => run_learn(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Eval(a) => run_eval(a),
        Command::Export(a) => run_export(a),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_spec_parses() {
        assert_eq!(parse_derive("vy=y").unwrap(), ("vy".into(), "y".into()));
        assert!(parse_derive("vy").is_err());
        assert!(parse_derive("=y").is_err());
    }

    #[test]
    fn config_rejects_bad_thresholds() {
        let args = ConfigArgs {
            penalty: PenaltyCriterion::Bic,
            templates: TemplateSet::default(),
            sigma2_floor: None,
            min_segment: None,
            stride: 1,
            theta_universal: Some(0.3),
            theta_relevant: Some(0.4),
            guard_window: 0,
            eps_ext: None,
        };
        assert!(RunConfig::from_args(&args).is_err());
        let ok = ConfigArgs {
            theta_universal: None,
            theta_relevant: None,
            ..args.clone()
        };
        assert!(RunConfig::from_args(&ok).is_ok());
        let bad_stride = ConfigArgs { stride: 0, ..ok };
        assert!(RunConfig::from_args(&bad_stride).is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
