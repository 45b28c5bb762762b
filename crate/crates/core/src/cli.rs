//! The `fairshare` command line.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::allocators::{build_allocator, build_balance_table, Allocator, AllocatorKind, Bf, PfPrime, PhaseSharing};
use crate::dynamics::{simulate, SimOptions};
use crate::error::{Error, Result};
use crate::fluid::{descent_report, integrate};
use crate::format::FloatFormat;
use crate::lyapunov::LyapunovContext;
use crate::pf_solver::alpha_fair_allocate;
use crate::scenario::Scenario;
use crate::stationary::{
    bf_stationary, empirical_distribution, empirical_distribution_with, pf_prime_stationary, total_variation,
    truncated_exact,
};
use crate::verify::{builtin_scenarios, run_all, VerifyOptions};

/// Exit status for a usage error.
pub const EXIT_USAGE: i32 = 1;
/// Exit status for invalid input.
pub const EXIT_VALIDATION: i32 = 2;
/// Exit status for a numerical failure.
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "fairshare", version, about = "Fair bandwidth sharing: allocations, simulation, stationary laws, fluid dynamics")]
struct Cli {
    /// Print floats as shortest round-trip decimals instead of 9 significant digits.
    #[arg(long, global = true)]
    raw: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rates, log-rates, link prices and KKT residual at one state.
    Allocate(AllocateArgs),
    /// Exact event simulation.
    Simulate(SimulateArgs),
    /// Stationary law on a box: closed form, or exact for the truncated chain.
    Stationary(StationaryArgs),
    /// Balance-function values on a box.
    BalanceTable(TableArgs),
    /// Fluid trajectory and Lyapunov descent.
    Fluid(FluidArgs),
    /// Run the property battery and print a JSON report.
    Verify(VerifyArgs),
    /// PF, PF' and BF side by side.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct AllocateArgs {
    /// Scenario file, or - for stdin.
    scenario: PathBuf,
    /// State, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x: Vec<f64>,
    /// Override the scenario's allocator (pf, pf_prime, bf).
    #[arg(long)]
    allocator: Option<String>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    scenario: PathBuf,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Initial state (defaults to the scenario's run.x0, else 0).
    #[arg(long, value_delimiter = ',')]
    x0: Option<Vec<u32>>,
    /// Write the event log here (CSV).
    #[arg(long)]
    events: Option<PathBuf>,
    /// Write the occupancy distribution here (CSV).
    #[arg(long)]
    occupancy: Option<PathBuf>,
    #[arg(long)]
    allocator: Option<String>,
}

#[derive(Args, Debug)]
struct StationaryArgs {
    scenario: PathBuf,
    /// Box edge N of [0, N]^R (defaults to run.box, else 6).
    #[arg(long = "box")]
    box_bound: Option<u32>,
    /// closed (PF' or BF formula) or exact (truncated generator).
    #[arg(long, default_value = "closed")]
    method: String,
    #[arg(long)]
    allocator: Option<String>,
    /// Write the distribution here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TableArgs {
    scenario: PathBuf,
    #[arg(long = "box")]
    box_bound: Option<u32>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FluidArgs {
    scenario: PathBuf,
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    h_step: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    x0: Option<Vec<f64>>,
    /// Write the trajectory here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Scenario files or directories of *.json files.
    paths: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seeds: Vec<u64>,
    /// Run at most this many checks.
    #[arg(long)]
    budget: Option<usize>,
    /// Skip the built-in scenarios.
    #[arg(long)]
    no_builtin: bool,
    /// Skip the long simulation checks.
    #[arg(long)]
    quick: bool,
    /// Corrupt one balance-table entry by this amount (mutation test).
    #[arg(long, allow_hyphen_values = true)]
    mutate_phi: Option<f64>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    scenario: PathBuf,
    #[arg(long, value_delimiter = ',')]
    x: Vec<u32>,
    /// Box for stationary distances (0 to skip).
    #[arg(long = "box", default_value_t = 4)]
    box_bound: u32,
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let fmt = if cli.raw { FloatFormat::Raw } else { FloatFormat::Sig9 };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match dispatch(cli.command, fmt, &mut out) {
        Ok(code) => code,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_NUMERICAL
            }
        }
    }
}

fn load(path: &Path) -> Result<Scenario> {
    if path.as_os_str() == "-" {
        let mut text = String::new();
        io::stdin().read_to_string(&mut text)?;
        Scenario::from_json(&text)
    } else {
        Scenario::from_path(path)
    }
}

fn resolve_seed(flag: Option<u64>, scenario: Option<u64>) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Ok(v) = std::env::var("FAIRSHARE_SEED") {
        return v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("FAIRSHARE_SEED = {v:?} is not an unsigned integer")));
    }
    Ok(scenario.unwrap_or(0))
}

fn pick_allocator(sc: &Scenario, flag: &Option<String>) -> Result<AllocatorKind> {
    match flag {
        Some(s) => s.parse(),
        None => Ok(sc.allocator.clone()),
    }
}

fn sink(path: &Option<PathBuf>) -> Result<Option<BufWriter<File>>> {
    path.as_ref().map(|p| File::create(p).map(BufWriter::new).map_err(Error::from)).transpose()
}

fn dispatch(cmd: Command, fmt: FloatFormat, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Allocate(a) => cmd_allocate(a, fmt, out),
        Command::Simulate(a) => cmd_simulate(a, fmt, out),
        Command::Stationary(a) => cmd_stationary(a, fmt, out),
        Command::BalanceTable(a) => cmd_table(a, fmt, out),
        Command::Fluid(a) => cmd_fluid(a, fmt, out),
        Command::Verify(a) => cmd_verify(a, out),
        Command::Compare(a) => cmd_compare(a, fmt, out),
    }
}

fn lattice_point(x: &[f64]) -> Result<Vec<u32>> {
    x.iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                Ok(v as u32)
            } else {
                Err(Error::InvalidArgument(format!("--x entry {v} must be a nonnegative integer for this allocator")))
            }
        })
        .collect()
}

fn cmd_allocate(a: AllocateArgs, fmt: FloatFormat, out: &mut dyn Write) -> Result<i32> {
    let sc = load(&a.scenario)?;
    let kind = pick_allocator(&sc, &a.allocator)?;
    if a.x.len() != sc.num_classes() {
        return Err(Error::InvalidArgument(format!("--x has {} entries, expected {}", a.x.len(), sc.num_classes())));
    }
    if a.x.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument("--x entries must be finite and >= 0".into()));
    }
    writeln!(out, "allocator: {}", kind.label())?;
    match &kind {
        AllocatorKind::Pf | AllocatorKind::AlphaFair { .. } => {
            let (w, alpha) = match &kind {
                AllocatorKind::AlphaFair { w, alpha } => (w.clone(), *alpha),
                _ => (vec![1.0; sc.num_classes()], 1.0),
            };
            let res = alpha_fair_allocate(&sc.region, &a.x, &w, alpha)?;
            let gamma: Vec<f64> = res.log_rates.iter().map(|g| g.finite().unwrap_or(f64::NEG_INFINITY)).collect();
            writeln!(out, "lambda: {}", fmt.join(&res.rates))?;
            writeln!(out, "gamma: {}", fmt.join(&gamma))?;
            writeln!(out, "prices: {}", fmt.join(&res.prices))?;
            writeln!(out, "kkt_residual: {}", fmt.fmt(res.kkt_residual))?;
            writeln!(out, "objective: {}", fmt.fmt(res.objective))?;
        }
        AllocatorKind::PfPrime | AllocatorKind::Bf => {
            let x = lattice_point(&a.x)?;
            let alloc = build_allocator(&kind, &sc.region, Some(x.iter().cloned().max().unwrap_or(1)))?;
            let rates = alloc.rates(&x)?;
            let gamma: Vec<f64> = rates.iter().map(|v| v.ln()).collect();
            writeln!(out, "lambda: {}", fmt.join(&rates))?;
            writeln!(out, "gamma: {}", fmt.join(&gamma))?;
            writeln!(out, "min_slack: {}", fmt.fmt(sc.region.min_slack(&rates)?))?;
        }
    }
    Ok(0)
}

/// Allocator for a scenario, phase-expanded when phase types are given.
fn scenario_allocator(sc: &Scenario, kind: &AllocatorKind, table_bound: u32) -> Result<Box<dyn Allocator>> {
    let base = build_allocator(kind, &sc.region, Some(table_bound))?;
    match sc.expansion()? {
        None => Ok(base),
        Some(exp) => Ok(Box::new(PhaseSharing::new(base, exp.class_of())?)),
    }
}

fn cmd_simulate(a: SimulateArgs, fmt: FloatFormat, out: &mut dyn Write) -> Result<i32> {
    let sc = load(&a.scenario)?;
    let kind = pick_allocator(&sc, &a.allocator)?;
    let t_end = a
        .t_end
        .or(sc.run.t_end)
        .ok_or_else(|| Error::Scenario("run.t_end is required for simulate (or pass --t-end)".into()))?;
    let seed = resolve_seed(a.seed, sc.run.seed)?;
    let box_bound = sc.run.box_bound.unwrap_or(30);
    let burn_in = sc.run.burn_in.unwrap_or(0.0);
    let expansion = sc.expansion()?;
    let model = expansion.as_ref().map_or(sc.model.clone(), |e| e.model.clone());
    let dim = model.num_classes();
    let x0: Vec<u32> = match (&a.x0, &sc.run.x0) {
        (Some(x), _) => x.clone(),
        (None, Some(x)) => x.iter().map(|v| v.round() as u32).collect(),
        (None, None) => vec![0; sc.num_classes()],
    };
    // Initial counts are given per class; with phases they start in phase 0.
    let x0 = match &expansion {
        None => x0,
        Some(e) => {
            if x0.len() != sc.num_classes() {
                return Err(Error::InvalidArgument(format!("x0 has {} entries, expected {}", x0.len(), sc.num_classes())));
            }
            let mut y = vec![0u32; dim];
            for (r, &v) in x0.iter().enumerate() {
                let j = e.labels.iter().position(|&(c, _)| c == r).expect("every class has a phase");
                y[j] = v;
            }
            y
        }
    };
    let alloc = scenario_allocator(&sc, &kind, box_bound.max(1))?;
    let opts = SimOptions { box_bound, burn_in, record_events: a.events.is_some(), ..SimOptions::default() };
    let run = simulate(&model, alloc.as_ref(), t_end, seed, &x0, opts)?;
    let dist = match &expansion {
        None => empirical_distribution(&run, burn_in)?,
        Some(e) => empirical_distribution_with(&run, burn_in, sc.num_classes(), |x| e.aggregate(x))?,
    };
    writeln!(out, "allocator: {}", run.allocator)?;
    writeln!(out, "seed: {seed}")?;
    writeln!(out, "t_end: {}", fmt.fmt(t_end))?;
    writeln!(out, "events: {}", run.event_count)?;
    writeln!(out, "final_state: {:?}", run.final_state)?;
    let means: Vec<f64> = (0..sc.num_classes())
        .map(|r| dist.marginal(r).iter().enumerate().map(|(k, p)| k as f64 * p).sum())
        .collect();
    writeln!(out, "mean_occupancy: {}", fmt.join(&means))?;
    writeln!(out, "leakage: {}", fmt.fmt(dist.leakage))?;
    for w in &dist.warnings {
        writeln!(out, "warning: {w}")?;
    }
    if let Some(mut w) = sink(&a.events)? {
        run.write_events_csv(&mut w, fmt)?;
    }
    if let Some(mut w) = sink(&a.occupancy)? {
        dist.write_csv(&mut w, fmt)?;
    }
    Ok(0)
}

fn cmd_stationary(a: StationaryArgs, fmt: FloatFormat, out: &mut dyn Write) -> Result<i32> {
    let sc = load(&a.scenario)?;
    let kind = pick_allocator(&sc, &a.allocator)?;
    let bound = a.box_bound.or(sc.run.box_bound).unwrap_or(6);
    let ctx = LyapunovContext::new(sc.region.clone(), sc.model.rho().to_vec())?;
    let closed = |k: &AllocatorKind| -> Result<_> {
        match k {
            AllocatorKind::PfPrime => pf_prime_stationary(&ctx, bound),
            AllocatorKind::Bf => bf_stationary(&build_balance_table(&sc.region, bound.max(1))?, &ctx, bound),
            other => Err(Error::InvalidArgument(format!(
                "no closed-form stationary law for {}; use --method exact",
                other.label()
            ))),
        }
    };
    let mut notes = Vec::new();
    let dist = match a.method.as_str() {
        "closed" => closed(&kind)?,
        "exact" => {
            if sc.phases.is_some() {
                return Err(Error::InvalidArgument("exact stationary laws are not computed for phase-type scenarios".into()));
            }
            let alloc = build_allocator(&kind, &sc.region, Some(bound.max(1)))?;
            let d = truncated_exact(&sc.model, alloc.as_ref(), bound)?;
            if let Ok(c) = closed(&kind) {
                notes.push(format!("tv_to_closed_form: {}", fmt.fmt(total_variation(&d, &c)?)));
            }
            if matches!(kind, AllocatorKind::Pf | AllocatorKind::AlphaFair { .. }) {
                notes.push("note: the truncated chain is not reversible, so the box law carries truncation bias".into());
            }
            d
        }
        other => return Err(Error::InvalidArgument(format!("--method {other:?} is not closed or exact"))),
    };
    match sink(&a.out)? {
        Some(mut w) => {
            dist.write_csv(&mut w, fmt)?;
            writeln!(out, "states: {}", dist.masses().len())?;
            writeln!(out, "log_normalizer: {}", fmt.fmt(dist.log_normalizer()))?;
            for n in &notes {
                writeln!(out, "{n}")?;
            }
        }
        None => {
            dist.write_csv(&mut *out, fmt)?;
            for n in &notes {
                eprintln!("{n}");
            }
        }
    }
    for w in &dist.warnings {
        eprintln!("warning: {w}");
    }
    Ok(0)
}

fn cmd_table(a: TableArgs, fmt: FloatFormat, out: &mut dyn Write) -> Result<i32> {
    let sc = load(&a.scenario)?;
    let bound = a.box_bound.or(sc.run.box_bound).unwrap_or(6);
    let table = build_balance_table(&sc.region, bound)?;
    let write = |w: &mut dyn Write| -> Result<()> {
        let mut c = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=sc.num_classes()).map(|r| format!("x_{r}")).collect();
        header.push("phi".into());
        c.write_record(&header)?;
        for (x, v) in table.lattice().points().zip(table.values()) {
            let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            rec.push(fmt.fmt(*v));
            c.write_record(&rec)?;
        }
        c.flush()?;
        Ok(())
    };
    match sink(&a.out)? {
        Some(mut w) => {
            write(&mut w)?;
            writeln!(out, "entries: {}", table.values().len())?;
        }
        None => write(out)?,
    }
    Ok(0)
}

fn cmd_fluid(a: FluidArgs, fmt: FloatFormat, out: &mut dyn Write) -> Result<i32> {
    let sc = load(&a.scenario)?;
    let t_end = a
        .t_end
        .or(sc.run.t_end)
        .ok_or_else(|| Error::Scenario("run.t_end is required for fluid (or pass --t-end)".into()))?;
    let h = a.h_step.or(sc.run.h_step).unwrap_or(1e-3);
    let x0 = a
        .x0
        .or_else(|| sc.run.x0.clone())
        .ok_or_else(|| Error::Scenario("run.x0 is required for fluid (or pass --x0)".into()))?;
    let traj = integrate(&sc.region, &sc.model, &x0, t_end, h)?;
    match sink(&a.out)? {
        Some(mut w) => {
            traj.write_csv(&mut w, fmt)?;
            writeln!(out, "steps: {}", traj.times.len() - 1)?;
            writeln!(out, "final_state: {}", fmt.join(traj.final_state()))?;
            writeln!(out, "bookkeeping_residual: {}", fmt.fmt(traj.bookkeeping_residual()))?;
            let ctx = LyapunovContext::new(sc.region.clone(), sc.model.rho().to_vec())?;
            if ctx.is_stable() {
                let rep = descent_report(&traj, &ctx)?;
                writeln!(out, "monotone: {}", rep.monotone)?;
                writeln!(out, "t_half: {}", rep.t_half.map_or("none".into(), |t| fmt.fmt(t)))?;
                writeln!(out, "max_h_bound: {}", fmt.fmt(rep.max_h_bound))?;
            } else {
                writeln!(out, "warning: loads are not in the interior of the region; no descent report")?;
            }
        }
        None => traj.write_csv(&mut *out, fmt)?,
    }
    Ok(0)
}

fn collect_paths(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn cmd_verify(a: VerifyArgs, out: &mut dyn Write) -> Result<i32> {
    let mut scenarios = Vec::new();
    for f in collect_paths(&a.paths)? {
        let mut sc = Scenario::from_path(&f)?;
        if sc.name.is_empty() {
            sc.name = f.file_stem().map_or("scenario".into(), |s| s.to_string_lossy().into_owned());
        }
        scenarios.push(sc);
    }
    let seeds = match std::env::var("FAIRSHARE_SEED") {
        Ok(_) if a.seeds == [1] => vec![resolve_seed(None, None)?],
        _ => a.seeds.clone(),
    };
    if !a.no_builtin {
        scenarios.extend(builtin_scenarios(seeds[0])?);
    }
    if scenarios.is_empty() {
        return Err(Error::InvalidArgument("no scenarios to verify".into()));
    }
    let opts = VerifyOptions { seeds, budget: a.budget, phi_mutation: a.mutate_phi, simulation: !a.quick };
    let report = run_all(&scenarios, &opts)?;
    let json = serde_json::to_string_pretty(&report)?;
    match sink(&a.out)? {
        Some(mut w) => {
            writeln!(w, "{json}")?;
            writeln!(out, "status: {}", report.status)?;
        }
        None => writeln!(out, "{json}")?,
    }
    Ok(if report.status == "fail" { EXIT_NUMERICAL } else { 0 })
}

fn cmd_compare(a: CompareArgs, fmt: FloatFormat, out: &mut dyn Write) -> Result<i32> {
    let sc = load(&a.scenario)?;
    let n = sc.num_classes();
    if a.x.len() != n {
        return Err(Error::InvalidArgument(format!("--x has {} entries, expected {n}", a.x.len())));
    }
    let top = a.x.iter().cloned().max().unwrap_or(1).max(a.box_bound).max(1);
    let table = Arc::new(build_balance_table(&sc.region, top)?);
    let xf: Vec<f64> = a.x.iter().map(|&v| v as f64).collect();
    let pf = alpha_fair_allocate(&sc.region, &xf, &vec![1.0; n], 1.0)?.rates;
    let pfp = PfPrime::new(sc.region.clone()).rates(&a.x)?;
    let bf = table.bf_rates(&a.x)?;
    writeln!(out, "pf: {}", fmt.join(&pf))?;
    writeln!(out, "pf_prime: {}", fmt.join(&pfp))?;
    writeln!(out, "bf: {}", fmt.join(&bf))?;
    let ctx = LyapunovContext::new(sc.region.clone(), sc.model.rho().to_vec())?;
    if a.box_bound > 0 && ctx.is_stable() && !sc.model.has_routing() && sc.phases.is_none() {
        let b = a.box_bound;
        let pfp_law = pf_prime_stationary(&ctx, b)?;
        let bf_law = bf_stationary(&table, &ctx, b)?;
        writeln!(out, "tv_pf_prime_bf: {}", fmt.fmt(total_variation(&pfp_law, &bf_law)?))?;
        match crate::pf_solver::pf_allocate(&sc.region, &xf).and_then(|_| {
            truncated_exact(&sc.model, build_allocator(&AllocatorKind::Pf, &sc.region, None)?.as_ref(), b)
        }) {
            Ok(pf_law) => {
                writeln!(out, "tv_pf_exact_pf_prime: {}", fmt.fmt(total_variation(&pf_law, &pfp_law)?))?;
                writeln!(out, "tv_pf_exact_bf: {}", fmt.fmt(total_variation(&pf_law, &bf_law)?))?;
                let bf_exact = truncated_exact(&sc.model, &Bf::new(table.clone()), b)?;
                writeln!(out, "tv_bf_exact_bf: {}", fmt.fmt(total_variation(&bf_exact, &bf_law)?))?;
            }
            Err(e) => writeln!(out, "warning: no exact PF law on the box: {e}")?,
        }
        writeln!(out, "box: {b}")?;
    }
    Ok(0)
}
