//! The property battery run by `fairshare verify`.
//!
//! Every check measures one number and compares it with a fixed threshold.
//! Checks are independent and run in parallel; the report lists them by
//! check id and then scenario name, so it does not depend on scheduling.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::allocators::{build_balance_table, Allocator, AllocatorKind, BalanceTable, Bf, Pf, PfPrime, PhaseSharing};
use crate::capacity::CapacityRegion;
use crate::dynamics::{scaled_path, simulate, SimOptions};
use crate::error::{Error, Result};
use crate::fluid::{integrate, integrate_until_level, path_distance, FluidTrajectory};
use crate::lattice::LatticeBox;
use crate::lyapunov::{norm_bounds_certificate, sandwich_report, scaling_rows, second_order_residual, LyapunovContext};
use crate::pf_solver::{legendre, pf_allocate, pf_gradient};
use crate::scenario::{RunSettings, Scenario};
use crate::stationary::{
    bf_stationary, detailed_balance_residual, empirical_distribution, empirical_distribution_with,
    ld_window_report, pf_prime_stationary, total_variation, truncated_exact,
    StateDistribution,
};
use crate::traffic::{drift_functional_all, expand_phase_type, remove_excursions, PhaseType, TrafficModel};

/// How a measured value is compared with its threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    AtMost,
    Below,
    AtLeast,
    Above,
}

impl Comparison {
    fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparison::AtMost => value <= threshold,
            Comparison::Below => value < threshold,
            Comparison::AtLeast => value >= threshold,
            Comparison::Above => value > threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    Error,
    Skipped,
    /// Recorded for information; never affects the overall status.
    Diagnostic,
}

/// Outcome of one check on one scenario.
#[derive(Debug, Clone, Serialize)]
pub struct CheckRecord {
    pub id: String,
    pub scenario: String,
    pub instance: String,
    pub measured: Option<f64>,
    pub comparison: Comparison,
    pub threshold: f64,
    pub status: CheckStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    /// `pass`, `fail` or `incomplete`.
    pub status: String,
    pub seeds: Vec<u64>,
    pub checks: Vec<CheckRecord>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.status == "pass"
    }

    pub fn count(&self, status: CheckStatus) -> usize {
        self.checks.iter().filter(|c| c.status == status).count()
    }
}

/// Settings for [`run_all`].
#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seeds: Vec<u64>,
    /// Run at most this many checks (in report order); the rest are skipped.
    pub budget: Option<usize>,
    /// Add this offset to the stored `φ(1, ..., 1)` before the balance checks.
    pub phi_mutation: Option<f64>,
    /// Include the long simulation checks.
    pub simulation: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seeds: vec![1], budget: None, phi_mutation: None, simulation: true }
    }
}

type Measure = Box<dyn Fn() -> Result<f64> + Send + Sync>;

struct Check {
    id: &'static str,
    scenario: String,
    instance: String,
    comparison: Comparison,
    threshold: f64,
    gating: bool,
    run: Measure,
}

fn check(
    id: &'static str,
    scenario: &str,
    instance: impl Into<String>,
    comparison: Comparison,
    threshold: f64,
    run: impl Fn() -> Result<f64> + Send + Sync + 'static,
) -> Check {
    Check {
        id,
        scenario: scenario.to_string(),
        instance: instance.into(),
        comparison,
        threshold,
        gating: true,
        run: Box::new(run),
    }
}

/// Box edge used for exhaustive checks on `R` classes.
fn box_for(classes: usize) -> u32 {
    match classes {
        0..=2 => 6,
        3 => 5,
        4 => 4,
        5 => 3,
        _ => 2,
    }
}

fn random_point(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Routing is reversible when `ν_r p_rs = ν_s p_sr` for all pairs.
fn reversible_routing(model: &TrafficModel) -> bool {
    let n = model.num_classes();
    let nu = model.nu();
    (0..n).all(|r| {
        (0..n).all(|s| {
            let a = nu[r] * model.routing()[(r, s)];
            let b = nu[s] * model.routing()[(s, r)];
            (a - b).abs() <= 1e-12 * (1.0 + a.abs())
        })
    })
}

/// Shared, lazily computed value for several checks.
type Shared<T> = Arc<OnceLock<std::result::Result<T, String>>>;

fn shared<T>() -> Shared<T> {
    Arc::new(OnceLock::new())
}

fn get<T: Clone>(cell: &Shared<T>, make: impl FnOnce() -> Result<T>) -> Result<T> {
    cell.get_or_init(|| make().map_err(|e| e.to_string()))
        .clone()
        .map_err(Error::Convergence)
}

fn scenario_checks(sc: &Scenario, opts: &VerifyOptions) -> Vec<Check> {
    let name = sc.name.clone();
    let n = sc.num_classes();
    let region = sc.region.clone();
    let model = sc.model.clone();
    let seeds = opts.seeds.clone();
    let mut out = Vec::new();
    let stable = region.in_interior(model.rho()).unwrap_or(false);

    {
        let (region, seeds) = (region.clone(), seeds.clone());
        out.push(check("allocation.pf_kkt_certified", &name, "50 random x in [0.1, 5]^R per seed", Comparison::AtMost, 1e-9, move || {
            let mut worst: f64 = 0.0;
            for &seed in &seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for _ in 0..50 {
                    let x = random_point(&mut rng, n, 0.1, 5.0);
                    worst = worst.max(pf_allocate(&region, &x)?.kkt_residual);
                }
            }
            Ok(worst)
        }));
    }
    {
        let (region, seeds) = (region.clone(), seeds.clone());
        out.push(check("allocation.gradient_is_log_rate", &name, "central differences at step 1e-4, 20 random x in [0.5, 5]^R", Comparison::AtMost, 1e-3, move || {
            let mut worst: f64 = 0.0;
            for &seed in &seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
                for _ in 0..20 {
                    let x = random_point(&mut rng, n, 0.5, 5.0);
                    let g = pf_gradient(&region, &x)?;
                    for r in 0..n {
                        let (mut up, mut dn) = (x.clone(), x.clone());
                        up[r] += 1e-4;
                        dn[r] -= 1e-4;
                        let fd = (legendre(&region, &up)? - legendre(&region, &dn)?) / 2e-4;
                        worst = worst.max((fd - g[r]).abs());
                    }
                }
            }
            Ok(worst)
        }));
    }
    {
        let (region, seeds) = (region.clone(), seeds.clone());
        out.push(check("allocation.difference_quotients_feasible", &name, "exp of one-sided conjugate differences, 100 random (x, eps)", Comparison::AtMost, 1e-8, move || {
            let mut worst: f64 = 0.0;
            for &seed in &seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ed);
                for _ in 0..100 {
                    let x = random_point(&mut rng, n, 0.2, 6.0);
                    let d = legendre(&region, &x)?;
                    let mut rates = vec![0.0; n];
                    for r in 0..n {
                        let eps = rng.random_range(1e-3..=x[r]);
                        let mut y = x.clone();
                        y[r] -= eps;
                        rates[r] = ((d - legendre(&region, &y)?) / eps).exp();
                    }
                    worst = worst.max(-region.min_slack(&rates)?);
                }
            }
            Ok(worst)
        }));
    }

    let bound = box_for(n);
    if !model.has_routing() && sc.phases.is_none() {
        let (region2, model2) = (region.clone(), model.clone());
        out.push(check("pf_prime.detailed_balance", &name, format!("all edges of [0, {bound}]^R"), Comparison::AtMost, 1e-9, move || {
            let ctx = LyapunovContext::new(region2.clone(), model2.rho().to_vec())?;
            let d = pf_prime_stationary(&ctx, bound)?;
            detailed_balance_residual(&d, &model2, &PfPrime::new(region2.clone()))
        }));
        let (region2, model2) = (region.clone(), model.clone());
        out.push(check("stationary.pf_prime_oracle", &name, format!("total variation on [0, {bound}]^R"), Comparison::AtMost, 1e-9, move || {
            let ctx = LyapunovContext::new(region2.clone(), model2.rho().to_vec())?;
            let exact = truncated_exact(&model2, &PfPrime::new(region2.clone()), bound)?;
            total_variation(&exact, &pf_prime_stationary(&ctx, bound)?)
        }));
    }

    // Balance-function checks share one table, optionally corrupted.
    let table_bound = if n <= 4 { 8 } else { 3 };
    let table: Shared<Arc<BalanceTable>> = shared();
    let mutation = opts.phi_mutation;
    let make_table = {
        let region = region.clone();
        move || -> Result<Arc<BalanceTable>> {
            let mut t = build_balance_table(&region, table_bound)?;
            if let Some(delta) = mutation {
                t.perturb(&vec![1; n], delta)?;
            }
            Ok(Arc::new(t))
        }
    };
    let make_table = Arc::new(make_table);
    {
        let (t, mk) = (table.clone(), make_table.clone());
        out.push(check("balance.extremality", &name, format!("BF rates feasible with a tight link on [0, {table_bound}]^R"), Comparison::AtMost, 1e-9, move || {
            Ok(get(&t, || mk())?.extremality_residual())
        }));
    }
    {
        let (t, mk) = (table.clone(), make_table.clone());
        out.push(check("balance.conjugate_sandwich", &name, format!("max violation of conjugate <= phi <= conjugate + r on [0, {table_bound}]^R"), Comparison::AtMost, 1e-7, move || {
            let rep = sandwich_report(&*get(&t, || mk())?)?;
            Ok(rep.lower.max(rep.upper))
        }));
    }
    {
        let (t, mk) = (table.clone(), make_table.clone());
        out.push(check("balance.scaling_window", &name, "phi(nx)/n - conjugate(x) in [0, r(nx)/n] along x = (1, ..., 1)", Comparison::AtMost, 0.0, move || {
            let ns: Vec<u32> = (1..=table_bound).collect();
            let rows = scaling_rows(&*get(&t, || mk())?, &vec![1; n], &ns)?;
            Ok(rows.iter().filter(|r| !r.within).count() as f64)
        }));
    }
    if stable {
        let (t, mk, region2, model2) = (table.clone(), make_table.clone(), region.clone(), model.clone());
        out.push(check("stationary.bf_large_deviation_window", &name, "-(1/n) log pi(nx) - L(x) within [log Z/n, (log Z + r(nx))/n]", Comparison::AtMost, 0.0, move || {
            let ctx = LyapunovContext::new(region2.clone(), model2.rho().to_vec())?;
            let ns: Vec<u32> = (1..=table_bound).collect();
            let rows = ld_window_report(&*get(&t, || mk())?, &ctx, &vec![1; n], &ns)?;
            Ok(rows.iter().filter(|r| !r.within).count() as f64)
        }));
    }
    if sc.phases.is_none() && (!model.has_routing() || reversible_routing(&model)) {
        let (t, mk, region2, model2) = (table.clone(), make_table.clone(), region.clone(), model.clone());
        let b = bound.min(table_bound);
        out.push(check("stationary.bf_oracle", &name, format!("total variation on [0, {b}]^R"), Comparison::AtMost, 1e-9, move || {
            let tab = get(&t, || mk())?;
            let ctx = LyapunovContext::new(region2.clone(), model2.rho().to_vec())?;
            let exact = truncated_exact(&model2, &Bf::new(tab.clone()), b)?;
            total_variation(&exact, &bf_stationary(&tab, &ctx, b)?)
        }));
    }
    if !model.has_routing() && sc.phases.is_none() {
        let (t, mk, region2, model2) = (table.clone(), make_table.clone(), region.clone(), model.clone());
        let b = bound.min(table_bound);
        out.push(check("balance.detailed_balance", &name, format!("all edges of [0, {b}]^R"), Comparison::AtMost, 1e-9, move || {
            let tab = get(&t, || mk())?;
            let ctx = LyapunovContext::new(region2.clone(), model2.rho().to_vec())?;
            detailed_balance_residual(&bf_stationary(&tab, &ctx, b)?, &model2, &Bf::new(tab.clone()))
        }));
    }
    if model.has_routing() && sc.phases.is_none() {
        let (t, mk, region2, model2) = (table.clone(), make_table.clone(), region.clone(), model.clone());
        let b = bound.min(table_bound);
        out.push(check("stationary.bf_routing_global_balance", &name, format!("max |pi Q| over states of [0, {}]^R away from the box edge", b - 1), Comparison::AtMost, 1e-12, move || {
            let tab = get(&t, || mk())?;
            let ctx = LyapunovContext::new(region2.clone(), model2.rho().to_vec())?;
            let d = bf_stationary(&tab, &ctx, b)?;
            interior_global_balance(&d, &model2, &Bf::new(tab.clone()))
        }));
    }
    {
        let (region, seeds) = (region.clone(), seeds.clone());
        out.push(check("conjugate.second_order_bound", &name, "100 random (x, h) with x in [0.5, 5]^R, x + h >= 0", Comparison::AtMost, 1e-7, move || {
            let mut worst = f64::NEG_INFINITY;
            for &seed in &seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2545);
                for _ in 0..100 {
                    let x = random_point(&mut rng, n, 0.5, 5.0);
                    let h: Vec<f64> = x.iter().map(|&v| rng.random_range(-v..v)).collect();
                    worst = worst.max(second_order_residual(&region, &x, &h)?);
                }
            }
            Ok(worst)
        }));
    }

    if n >= 2 {
        let model2 = model.clone();
        out.push(check("traffic.excursion_identity", &name, "every proper nonempty removed set", Comparison::AtMost, 1e-10, move || {
            let mut worst: f64 = 0.0;
            for mask in 1u32..(1 << n) - 1 {
                let removed: Vec<usize> = (0..n).filter(|r| mask & (1 << r) != 0).collect();
                let exc = remove_excursions(&model2, &removed)?;
                worst = worst.max(exc.identity_residual(model2.nu())?);
            }
            Ok(worst)
        }));
    }
    if model.has_routing() {
        let (model2, seeds) = (model.clone(), seeds.clone());
        out.push(check("traffic.drift_functional_nonnegative", &name, "200 random u per reduced routing matrix; F(u) >= 0 and F(u) >= F(u+)", Comparison::AtMost, 1e-12, move || {
            let mut worst: f64 = 0.0;
            for &seed in &seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7f4a);
                for mask in 0u32..(1 << n) - 1 {
                    let removed: Vec<usize> = (0..n).filter(|r| mask & (1 << r) != 0).collect();
                    let exc = remove_excursions(&model2, &removed)?;
                    let k = exc.kept.len();
                    for _ in 0..200 {
                        let u = random_point(&mut rng, k, -3.0, 3.0);
                        let plus: Vec<f64> = u.iter().map(|v| v.max(0.0)).collect();
                        let f = drift_functional_all(&exc.p_tilde, &u, f64::exp_m1)?;
                        let fp = drift_functional_all(&exc.p_tilde, &plus, f64::exp_m1)?;
                        for r in 0..k {
                            worst = worst.max(-f[r]).max(fp[r] - f[r]);
                        }
                    }
                }
            }
            Ok(worst)
        }));
    }
    if let Some(phases) = &sc.phases {
        let (region2, model2, phases2) = (region.clone(), model.clone(), phases.clone());
        out.push(check("phase.class_loads", &name, "sum of phase loads equals nu_r times mean service", Comparison::AtMost, 1e-12, move || {
            let exp = expand_phase_type(&region2, &model2, &phases2)?;
            let loads = exp.class_loads();
            let mut worst: f64 = 0.0;
            for r in 0..n {
                let target = model2.nu()[r] * phases2[r].mean()?;
                worst = worst.max((loads[r] - target).abs());
            }
            Ok(worst)
        }));
    }
    if stable {
        let ctx = LyapunovContext::new(region.clone(), model.rho().to_vec());
        if let Ok(ctx) = ctx {
            {
                let ctx = ctx.clone();
                out.push(check("lyapunov.norm_bounds", &name, "sampled lower constant a in a |x| <= L(x)", Comparison::Above, 0.0, move || {
                    Ok(norm_bounds_certificate(&ctx, 256, 0)?.a_hat)
                }));
            }
            let h = sc.run.h_step.unwrap_or(1e-3);
            let traj: Shared<Arc<FluidTrajectory>> = shared();
            let make = {
                let (region, model, ctx) = (region.clone(), model.clone(), ctx.clone());
                Arc::new(move || -> Result<Arc<FluidTrajectory>> {
                    let ones = vec![1.0; n];
                    let l1 = ctx.value(&ones)?;
                    let x0: Vec<f64> = ones.iter().map(|v| v / l1).collect();
                    Ok(Arc::new(integrate_until_level(&region, &model, &x0, h, 0.01, 500.0)?))
                })
            };
            let instance = format!("x0 on the level set L = 1 along (1, ..., 1), step {h}");
            {
                let (t, mk, ctx) = (traj.clone(), make.clone(), ctx.clone());
                out.push(check("fluid.lyapunov_nonincreasing", &name, instance.clone(), Comparison::AtMost, 0.0, move || {
                    let rep = crate::fluid::descent_report(&*get(&t, || mk())?, &ctx)?;
                    Ok(rep.max_increase - rep.tolerance)
                }));
            }
            {
                let (t, mk) = (traj.clone(), make.clone());
                out.push(check("fluid.reaches_one_percent", &name, instance.clone(), Comparison::AtMost, 0.01, move || {
                    Ok(*get(&t, || mk())?.lyapunov().last().expect("nonempty"))
                }));
            }
            {
                let (t, mk) = (traj.clone(), make.clone());
                out.push(check("fluid.drift_bound_negative", &name, instance, Comparison::Below, 0.0, move || {
                    let tr = get(&t, || mk())?;
                    Ok(tr
                        .states
                        .iter()
                        .zip(&tr.drifts)
                        .filter(|(x, _)| x.iter().any(|&v| v > 0.0))
                        .map(|(_, d)| d.h_bound)
                        .fold(f64::NEG_INFINITY, f64::max))
                }));
            }
        }
    }
    out
}

/// `max |(πQ)(x)|` over states `x` with `x + e_s` inside the box for every
/// `s`, where truncation removes no transition.
pub fn interior_global_balance(dist: &StateDistribution, model: &TrafficModel, allocator: &dyn Allocator) -> Result<f64> {
    let lattice = dist.lattice();
    let n = lattice.dim();
    let mut flow = vec![0.0; lattice.len()];
    for (i, x) in lattice.points().enumerate() {
        let p = dist.masses()[i];
        for (tr, q) in crate::dynamics::transition_rates(model, allocator, &x)? {
            let mut y = x.clone();
            tr.apply(&mut y);
            flow[i] -= p * q;
            if let Some(j) = lattice.index(&y) {
                flow[j] += p * q;
            }
        }
    }
    let inner = LatticeBox::new(n, lattice.bound().saturating_sub(1));
    Ok(inner
        .points()
        .filter_map(|x| lattice.index(&x))
        .map(|i| flow[i].abs())
        .fold(0.0, f64::max))
}

/// Checks tied to particular built-in instances.
fn instance_checks(opts: &VerifyOptions) -> Vec<Check> {
    let mut out = Vec::new();
    out.push(check("allocation.two_link_reference", "b-two-link-three-class", "x = (1, 1, 1) against (2/3, 2/3, 1/3)", Comparison::AtMost, 1e-7, || {
        let res = pf_allocate(&CapacityRegion::two_link_three_class(), &[1.0, 1.0, 1.0])?;
        let want = [2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0];
        Ok(res.rates.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }));
    out.push(check("balance.scaling_convergence", "a2-single-link-two-classes", "g(50) < g(5) and every g(n) in its window, x = (1, 1)", Comparison::AtMost, 0.0, || {
        let region = CapacityRegion::single_link(2, 1.0)?;
        let rows = crate::lyapunov::ld_convergence_report(&region, &[1, 1], &[1, 2, 5, 10, 20, 50])?;
        let bad = rows.iter().filter(|r| !r.within).count();
        let g5 = rows[2].gap;
        let g50 = rows[5].gap;
        Ok(bad as f64 + if g50 < g5 { 0.0 } else { 1.0 })
    }));
    if !opts.simulation {
        return out;
    }
    let seed = opts.seeds.first().copied().unwrap_or(1);
    out.push(check("simulation.mm1_occupancy", "a1-single-link-one-class", "total variation to geometric(1/2) on [0, 30], at least 1e6 events", Comparison::AtMost, 0.02, move || {
        let d = mm1_occupancy(seed)?;
        let w: Vec<f64> = (0..=30).map(|k| 0.5f64.powi(k)).collect();
        total_variation(&d, &StateDistribution::from_weights(LatticeBox::new(1, 30), w)?)
    }));
    out.push(check("simulation.insensitivity", "f-erlang2", "PF' counts with Erlang-2 vs exponential service, total variation on [0, 30]^2, 4e6 events each", Comparison::AtMost, 0.02, move || {
        insensitivity_gap(seed, 4_000_000)
    }));
    out.push(check("simulation.fluid_limit", "single-class-light-load", "nu_bar 0.1, fluid start 0.5, horizon 1: median sup distance over 20 seeds at z = 200 (z = 50 must be larger)", Comparison::AtMost, 0.1, move || {
        let (m50, m200) = fluid_limit_medians(0.1, 0.5, 1.0, seed, 20)?;
        Ok(if m200 < m50 { m200 } else { f64::INFINITY })
    }));
    out
}

/// Occupancy of the single-class unit-link queue at `ν̄ = 0.5`, `μ = 1`.
pub fn mm1_occupancy(seed: u64) -> Result<StateDistribution> {
    let region = CapacityRegion::single_link(1, 1.0)?;
    let model = TrafficModel::without_routing(vec![0.5], vec![1.0])?;
    let opts = SimOptions { record_events: false, ..SimOptions::default() };
    let run = simulate(&model, &Pf::new(region), 1.1e6, seed, &[0], opts)?;
    if run.event_count < 1_000_000 {
        return Err(Error::Convergence(format!("only {} events simulated", run.event_count)));
    }
    empirical_distribution(&run, 0.0)
}

/// Total variation between class-count laws under PF′ with Erlang-2 and
/// exponential service, unit link, loads (0.3, 0.3), `events` events each.
pub fn insensitivity_gap(seed: u64, events: u64) -> Result<f64> {
    let region = CapacityRegion::single_link(2, 1.0)?;
    let model = TrafficModel::without_routing(vec![0.3, 0.3], vec![1.0, 1.0])?;
    let t_end = events as f64 / 1.2 * 1.05;
    let opts = SimOptions { record_events: false, max_events: u64::MAX, ..SimOptions::default() };
    let exp_run = simulate(&model, &PfPrime::new(region.clone()), t_end, seed, &[0, 0], opts.clone())?;
    let erl = PhaseType::erlang(2, 2.0)?;
    let exp = expand_phase_type(&region, &model, &[erl.clone(), erl])?;
    let alloc = PhaseSharing::new(Box::new(PfPrime::new(region)), exp.class_of())?;
    let erl_run = simulate(&exp.model, &alloc, t_end, seed, &vec![0; exp.labels.len()], SimOptions { stream: 1, ..opts })?;
    if exp_run.event_count < events || erl_run.event_count < events {
        return Err(Error::Convergence("too few simulated events".into()));
    }
    let a = empirical_distribution(&exp_run, 0.0)?;
    let b = empirical_distribution_with(&erl_run, 0.0, 2, |x| exp.aggregate(x))?;
    total_variation(&a, &b)
}

/// Median sup distances between rescaled simulation and fluid path for the
/// single-class unit-link queue with `μ = 1`, arrival rate `nu_bar` and
/// fluid start `x0`, at scales 50 and 200.
pub fn fluid_limit_medians(nu_bar: f64, x0: f64, horizon: f64, seed: u64, reps: u64) -> Result<(f64, f64)> {
    let region = CapacityRegion::single_link(1, 1.0)?;
    let model = TrafficModel::without_routing(vec![nu_bar], vec![1.0])?;
    let pf = Pf::new(region.clone());
    let fluid = integrate(&region, &model, &[x0], horizon, 1e-3)?;
    let median = |z: f64| -> Result<f64> {
        let mut d = (0..reps)
            .map(|i| Ok(path_distance(&scaled_path(&model, &pf, z, &[x0], horizon, seed, i)?, &fluid)))
            .collect::<Result<Vec<f64>>>()?;
        d.sort_by(f64::total_cmp);
        let m = d.len();
        Ok(if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) })
    };
    Ok((median(50.0)?, median(200.0)?))
}

fn scenario(name: &str, region: CapacityRegion, model: TrafficModel, phases: Option<Vec<PhaseType>>) -> Scenario {
    Scenario { name: name.into(), region, model, phases, allocator: AllocatorKind::Pf, run: RunSettings::default() }
}

/// The built-in scenario set. `seed` drives the random regions.
pub fn builtin_scenarios(seed: u64) -> Result<Vec<Scenario>> {
    let mut out = vec![
        scenario("a1-single-link-one-class", CapacityRegion::single_link(1, 1.0)?, TrafficModel::without_routing(vec![0.5], vec![1.0])?, None),
        scenario("a2-single-link-two-classes", CapacityRegion::single_link(2, 1.0)?, TrafficModel::without_routing(vec![0.3, 0.3], vec![1.0, 1.0])?, None),
        scenario("b-two-link-three-class", CapacityRegion::two_link_three_class(), TrafficModel::without_routing(vec![0.4, 0.4, 0.4], vec![1.0; 3])?, None),
        scenario("c-line-four-class", CapacityRegion::line(3), TrafficModel::without_routing(vec![0.3; 4], vec![1.0; 4])?, None),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..2 {
        let region = random_region(&mut rng, 3, 4)?;
        let rates = pf_allocate(&region, &[1.0; 4])?.rates;
        let nu: Vec<f64> = rates.iter().map(|v| 0.5 * v).collect();
        out.push(scenario(&format!("d-random-{seed}-{k}"), region, TrafficModel::without_routing(nu, vec![1.0; 4])?, None));
    }
    let tandem = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
    out.push(scenario(
        "e-tandem",
        CapacityRegion::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0, 1.0])?,
        TrafficModel::new(vec![0.4, 0.0], vec![1.0, 1.0], tandem)?,
        None,
    ));
    let swap = DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 0.0]);
    out.push(scenario(
        "e-reversible-routing",
        CapacityRegion::single_link(2, 1.0)?,
        TrafficModel::new(vec![0.15, 0.15], vec![1.0, 1.0], swap)?,
        None,
    ));
    let two = CapacityRegion::single_link(2, 1.0)?;
    let base = TrafficModel::without_routing(vec![0.3, 0.3], vec![1.0, 1.0])?;
    let erl = PhaseType::erlang(2, 2.0)?;
    out.push(scenario("f-erlang2", two.clone(), base.clone(), Some(vec![erl.clone(), erl])));
    let hyper = PhaseType::hyperexponential(vec![0.5, 0.5], vec![1.0, 2.0])?;
    out.push(scenario("f-hyperexponential", two, base, Some(vec![hyper.clone(), hyper])));
    Ok(out)
}

/// `links × classes` region with entries in `{0} ∪ [0.5, 1.5]`, each class
/// on at least one link, capacities in `[1, 2]`.
pub fn random_region(rng: &mut ChaCha8Rng, links: usize, classes: usize) -> Result<CapacityRegion> {
    let mut rows = vec![vec![0.0; classes]; links];
    for r in 0..classes {
        let forced = rng.random_range(0..links);
        for (l, row) in rows.iter_mut().enumerate() {
            if l == forced || rng.random_bool(0.5) {
                row[r] = rng.random_range(0.5..1.5);
            }
        }
    }
    let c = (0..links).map(|_| rng.random_range(1.0..2.0)).collect();
    CapacityRegion::new(rows, c)
}

/// Runs every applicable check on every scenario.
pub fn run_all(scenarios: &[Scenario], opts: &VerifyOptions) -> Result<VerificationReport> {
    if opts.seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is needed".into()));
    }
    let mut checks: Vec<Check> = scenarios.iter().flat_map(|s| scenario_checks(s, opts)).collect();
    if scenarios.iter().any(|s| s.name.starts_with("a1-")) {
        checks.extend(instance_checks(opts));
    }
    checks.sort_by(|a, b| (a.id, &a.scenario).cmp(&(b.id, &b.scenario)));
    let budget = opts.budget.unwrap_or(usize::MAX);
    let records: Vec<CheckRecord> = checks
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut rec = CheckRecord {
                id: c.id.to_string(),
                scenario: c.scenario.clone(),
                instance: c.instance.clone(),
                measured: None,
                comparison: c.comparison,
                threshold: c.threshold,
                status: CheckStatus::Skipped,
                message: None,
                runtime_s: 0.0,
            };
            if i >= budget {
                return rec;
            }
            let start = Instant::now();
            let outcome = (c.run)();
            rec.runtime_s = start.elapsed().as_secs_f64();
            match outcome {
                Ok(v) => {
                    rec.measured = Some(v);
                    rec.status = if !c.gating {
                        CheckStatus::Diagnostic
                    } else if c.comparison.holds(v, c.threshold) {
                        CheckStatus::Pass
                    } else {
                        CheckStatus::Fail
                    };
                }
                Err(e) => {
                    rec.status = CheckStatus::Error;
                    rec.message = Some(e.to_string());
                }
            }
            rec
        })
        .collect();
    let failed = records.iter().any(|r| matches!(r.status, CheckStatus::Fail | CheckStatus::Error));
    let skipped = records.iter().any(|r| r.status == CheckStatus::Skipped);
    let status = if failed {
        "fail"
    } else if skipped {
        "incomplete"
    } else {
        "pass"
    };
    Ok(VerificationReport { status: status.into(), seeds: opts.seeds.clone(), checks: records })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> VerifyOptions {
        VerifyOptions { simulation: false, ..VerifyOptions::default() }
    }

    #[test]
    fn zero_budget_skips_everything() {
        let sc = builtin_scenarios(1).unwrap();
        let rep = run_all(&sc[..2], &VerifyOptions { budget: Some(0), ..quick() }).unwrap();
        assert_eq!(rep.status, "incomplete");
        assert!(rep.checks.iter().all(|c| c.status == CheckStatus::Skipped));
    }

    #[test]
    fn small_scenarios_pass_and_mutation_is_caught() {
        let sc = builtin_scenarios(1).unwrap();
        let picked: Vec<Scenario> = sc.into_iter().filter(|s| s.name.starts_with("a2") || s.name.starts_with("b-")).collect();
        let rep = run_all(&picked, &quick()).unwrap();
        let bad: Vec<_> = rep.checks.iter().filter(|c| c.status != CheckStatus::Pass).collect();
        assert!(bad.is_empty(), "{bad:#?}");
        let again = run_all(&picked, &quick()).unwrap();
        let ids = |r: &VerificationReport| r.checks.iter().map(|c| (c.id.clone(), c.scenario.clone(), c.measured)).collect::<Vec<_>>();
        assert_eq!(ids(&rep), ids(&again));

        let mutated = run_all(&picked, &VerifyOptions { phi_mutation: Some(0.1), ..quick() }).unwrap();
        assert_eq!(mutated.status, "fail");
        assert!(mutated.checks.iter().any(|c| c.id == "balance.extremality" && c.status == CheckStatus::Fail));
    }
}
