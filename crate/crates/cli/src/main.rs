use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use funnel_mpc::error::Error;
use funnel_mpc::mpc::RunStatus;
use funnel_mpc::scenarios::{bounds_report, run, ControllerId, InitId, Outcome, ScenarioId, Settings};
use funnel_mpc::trace::mean_u_fc;
use rayon::prelude::*;
use serde_json::Value;
use sha2::{Digest, Sha256};

const EXIT_VIOLATED: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_CONFIG: u8 = 4;
const EXIT_OTHER: u8 = 1;

/// Funnel MPC benchmark runner.
#[derive(Parser)]
#[command(name = "fmpc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario with one controller.
    Run(RunArgs),
    /// Run the cartesian product of `--grid` values in parallel.
    Sweep(SweepArgs),
    /// Re-run the benchmark studies and check their outcomes.
    Validate(ValidateArgs),
    /// Print the input bound, ZoH gain and sampling step calculators.
    Bounds(BoundsArgs),
}

#[derive(Args)]
struct Selection {
    #[arg(long)]
    scenario: Option<ScenarioId>,
    #[arg(long)]
    controller: Option<ControllerId>,
    /// Config file with `section.key = value` entries or `[section]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set mpc.delta=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    sel: Selection,
    /// Drop the funnel constraint and use the plain quadratic stage cost.
    #[arg(long)]
    no_constraints: bool,
    /// Directory for trace.csv, summary.json and iterations.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    sel: Selection,
    /// Swept key with comma separated values, e.g. `--grid mpc.delta=0.1,0.05`.
    #[arg(long, value_name = "KEY=V1,V2,..")]
    grid: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    /// Only check these studies (1 to 6).
    #[arg(long)]
    criterion: Vec<u8>,
}

#[derive(Args)]
struct BoundsArgs {
    #[command(flatten)]
    sel: Selection,
    /// Activation threshold of the ZoH controller.
    #[arg(long)]
    iota: Option<f64>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
}

enum Failure {
    Config(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            e => Failure::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Bounds(a) => cmd_bounds(a),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_OTHER)
        }
    }
}

/// Prints to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn settings(sel: &Selection) -> Result<Settings, Failure> {
    let mut st = match (&sel.config, sel.scenario, sel.controller) {
        (Some(path), _, _) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
            Settings::from_config_str(&text)?
        }
        (None, Some(s), Some(c)) => Settings::defaults(s, c)?,
        (None, Some(s), None) => Settings::defaults(s, default_controller(s))?,
        (None, None, _) => return Err(Failure::Config("--scenario or --config is required".into())),
    };
    for kv in &sel.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Config(format!("expected KEY=VALUE, got {kv:?}")))?;
        st.set(k.trim(), v)?;
    }
    Ok(st)
}

fn default_controller(s: ScenarioId) -> ControllerId {
    match s {
        ScenarioId::MassOnCarCh5 => ControllerId::Zoh,
        ScenarioId::Torsional => ControllerId::SampledFmpc,
        _ => ControllerId::Fmpc,
    }
}

fn exit_code(o: &Outcome) -> u8 {
    match o.result.status {
        RunStatus::OcpInfeasible { .. } => EXIT_INFEASIBLE,
        RunStatus::LearnerFailed { .. } => EXIT_OTHER,
        RunStatus::Completed if !o.result.summary.violated => 0,
        _ => EXIT_VIOLATED,
    }
}

fn write_outputs(o: &Outcome, dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)?;
    o.result.trace.write_csv(BufWriter::new(File::create(dir.join("trace.csv"))?))?;
    let summary = serde_json::to_string_pretty(&o.summary_json()).map_err(|e| Failure::Other(e.to_string()))?;
    fs::write(dir.join("summary.json"), summary + "\n")?;
    let mut it = BufWriter::new(File::create(dir.join("iterations.jsonl"))?);
    for rec in &o.result.iterations {
        let line = serde_json::to_string(rec).map_err(|e| Failure::Other(e.to_string()))?;
        writeln!(it, "{line}")?;
    }
    it.flush()?;
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<u8, Failure> {
    let mut st = settings(&a.sel)?;
    if a.no_constraints {
        st.mpc.funnel_constraint = false;
    }
    let o = run(&st)?;
    if let Some(dir) = &a.out {
        write_outputs(&o, dir)?;
    }
    let summary = serde_json::to_string_pretty(&o.summary_json()).map_err(|e| Failure::Other(e.to_string()))?;
    emit(&summary);
    Ok(exit_code(&o))
}

/// First 12 hex digits of the SHA-256 of the resolved settings.
fn config_hash(st: &Settings) -> String {
    let text = serde_json::to_string(st).expect("settings serialize");
    Sha256::digest(text.as_bytes()).iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn expand(base: &Settings, grid: &[String]) -> Result<Vec<Settings>, Failure> {
    let mut all = vec![base.clone()];
    for g in grid {
        let (key, values) = g.split_once('=').ok_or_else(|| Failure::Config(format!("expected KEY=V1,V2, got {g:?}")))?;
        let mut next = Vec::new();
        for st in &all {
            for v in values.split(',') {
                let mut s = st.clone();
                s.set(key.trim(), v)?;
                next.push(s);
            }
        }
        all = next;
    }
    Ok(all)
}

fn cmd_sweep(a: SweepArgs) -> Result<u8, Failure> {
    let base = settings(&a.sel)?;
    let runs = expand(&base, &a.grid)?;
    let workers = std::env::var("FMPC_WORKERS").ok().and_then(|v| v.parse().ok()).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().map_err(|e| Failure::Other(e.to_string()))?;
    let results: Vec<(String, Result<u8, Failure>)> = pool.install(|| {
        runs.par_iter()
            .map(|st| {
                let key = config_hash(st);
                let res = run(st).map_err(Failure::from).and_then(|o| {
                    write_outputs(&o, &a.out.join(&key))?;
                    Ok(exit_code(&o))
                });
                (key, res)
            })
            .collect()
    });
    let mut worst = 0;
    for (key, res) in results {
        let code = match res {
            Ok(c) => c,
            Err(Failure::Config(m)) => {
                eprintln!("{key}: {m}");
                EXIT_CONFIG
            }
            Err(Failure::Other(m)) => {
                eprintln!("{key}: {m}");
                EXIT_OTHER
            }
        };
        emit(&format!("{key} exit {code}"));
        worst = worst.max(code);
    }
    Ok(worst)
}

fn contained(o: &Outcome) -> bool {
    o.result.status == RunStatus::Completed && !o.result.summary.violated
}

fn defaults(s: ScenarioId, c: ControllerId) -> Result<Settings, Failure> {
    Ok(Settings::defaults(s, c)?)
}

/// One study of the benchmark suite: (passed, detail).
fn study(id: u8) -> Result<(bool, String), Failure> {
    Ok(match id {
        1 => {
            let o = run(&defaults(ScenarioId::Reactor, ControllerId::Fmpc)?)?;
            let s = &o.result.summary;
            (contained(&o) && s.max_ratio < 1.0 - 1e-9, format!("max |e|/psi {:.6}, {:.1}s", s.max_ratio, s.runtime_s))
        }
        2 => {
            let o = run(&defaults(ScenarioId::Reactor, ControllerId::QuadraticMpc)?)?;
            (o.result.summary.violated, format!("violated {}", o.result.summary.violated))
        }
        3 => {
            let mut st = defaults(ScenarioId::Reactor, ControllerId::Robust)?;
            let carry = run(&st)?;
            st.mpc.init = InitId::ExactOutput;
            let exact = run(&st)?;
            let (ic, ie) = (carry.result.summary.int_u_fc, exact.result.summary.int_u_fc);
            (contained(&carry) && contained(&exact) && ie < ic, format!("int|u_fc| carry-over {ic:.3}, re-init {ie:.3}"))
        }
        4 => {
            let o = run(&defaults(ScenarioId::Reactor, ControllerId::Learning)?)?;
            let mean = mean_u_fc(&o.result.trace, 2.6, 4.0);
            (contained(&o) && mean <= 0.01 * o.settings.mpc.u_max, format!("mean |u_fc| on [2.6,4] {mean:.4}"))
        }
        5 => {
            let mut st = defaults(ScenarioId::MassOnCarCh5, ControllerId::Zoh)?;
            st.zoh.nu = Some(27.78 * 1.001);
            st.zoh.sample_step = Some(3.2e-3);
            st.run.h_system = 8e-4;
            let o = run(&st)?;
            let max_u = o.result.summary.max_u_norm;
            let ok = contained(&o) && o.result.summary.max_ratio < 1.0 && max_u <= 37.04 + 1e-9;
            (ok, format!("max |u| {max_u:.4} (limit 37.04)"))
        }
        6 => {
            let first = run(&defaults(ScenarioId::Torsional, ControllerId::SampledFmpc)?)?;
            let mut st = defaults(ScenarioId::Torsional, ControllerId::SampledFmpc)?;
            for (k, v) in [("mpc.delta", "0.2"), ("mpc.control_step", "0.2"), ("mpc.horizon", "1"), ("mpc.u_max", "30")] {
                st.set(k, v)?;
            }
            st.run.h_model = 1e-2;
            st.run.h_system = 1e-2;
            let second = run(&st)?;
            let (ua, ub) = (first.result.summary.max_u_norm, second.result.summary.max_u_norm);
            (
                contained(&first) && contained(&second) && ua <= 0.9 * 267.0 && ub <= 0.9 * 30.0,
                format!("max |u| {ua:.2}/267 and {ub:.2}/30"),
            )
        }
        _ => return Err(Failure::Config(format!("no study {id}"))),
    })
}

fn cmd_validate(a: ValidateArgs) -> Result<u8, Failure> {
    let ids: Vec<u8> = if a.criterion.is_empty() { (1..=6).collect() } else { a.criterion.clone() };
    let mut code = 0;
    for id in ids {
        let (ok, detail) = study(id)?;
        emit(&format!("criterion {id}: {} ({detail})", if ok { "PASS" } else { "FAIL" }));
        if !ok {
            code = EXIT_VIOLATED;
        }
    }
    Ok(code)
}

fn cmd_bounds(a: BoundsArgs) -> Result<u8, Failure> {
    let mut st = settings(&a.sel)?;
    if let Some(iota) = a.iota {
        st.zoh.iota = iota;
    }
    let rep = bounds_report(&st)?;
    if a.json {
        let v: Value = serde_json::to_value(&rep).map_err(|e| Failure::Other(e.to_string()))?;
        emit(&serde_json::to_string_pretty(&v).map_err(|e| Failure::Other(e.to_string()))?);
        return Ok(0);
    }
    let b = &rep.dyn_bounds;
    emit(&format!("scenario        {}", rep.scenario));
    emit(&format!("f_max           {:.6}", b.f_max));
    emit(&format!("g_max           {:.6}", b.g_max));
    emit(&format!("g_inv_max       {:.6}", b.g_inv_max));
    if let Some(g) = b.g_min {
        emit(&format!("g_min           {g:.6}"));
    }
    emit(&format!("sup |yref^(r)|  {:.6}", rep.yref_r_sup));
    emit(&format!("u_max >=        {:.6}", rep.u_max_bound));
    if let Some(z) = &rep.zoh {
        emit(&format!("iota            {}", z.iota));
        emit(&format!("kappa0          {:.6}", z.kappa0));
        emit(&format!("kappa1          {:.6}", z.kappa1));
        emit(&format!("nu >=           {:.6}", z.nu_min));
        emit(&format!("nu              {:.6}", z.nu));
        emit(&format!("sample step <=  {:.6e}", z.sample_step));
        emit(&format!("|u| <= nu/iota  {:.6}", z.u_cap));
    }
    if let Some(s) = &rep.sampled {
        emit(&format!("sampled FMPC    {}", serde_json::to_string(s).map_err(|e| Failure::Other(e.to_string()))?));
    }
    Ok(0)
}
