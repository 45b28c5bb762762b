//! Acceptance criteria 1 to 16, one printed line each.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use fairshare::allocators::{build_balance_table, Bf, Pf, PfPrime};
use fairshare::capacity::CapacityRegion;
use fairshare::dynamics::{simulate, SimOptions};
use fairshare::fluid::{descent_report, integrate_until_level};
use fairshare::lattice::LatticeBox;
use fairshare::lyapunov::{ld_convergence_report, sandwich_report, second_order_residual, LyapunovContext};
use fairshare::pf_solver::{legendre, pf_allocate, pf_gradient};
use fairshare::stationary::{
    bf_stationary, detailed_balance_residual, pf_prime_stationary, total_variation, truncated_exact, StateDistribution,
};
use fairshare::traffic::{drift_functional_all, expand_phase_type, remove_excursions, visit_matrix, PhaseType, TrafficModel};
use fairshare::verify::{builtin_scenarios, fluid_limit_medians, insensitivity_gap, mm1_occupancy, random_region};
use fairshare::scenario::Scenario;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Criterion = fn() -> Outcome;

fn scenarios(prefixes: &[&str]) -> Vec<Scenario> {
    builtin_scenarios(1)
        .unwrap()
        .into_iter()
        .filter(|s| prefixes.iter().any(|p| s.name.starts_with(p)))
        .collect()
}

fn point(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn random_instance_region(rng: &mut ChaCha8Rng) -> CapacityRegion {
    // Draws where some link carries no class are rejected and redrawn.
    loop {
        let links = rng.random_range(1..=3);
        let classes = rng.random_range(1..=4);
        if let Ok(region) = random_region(rng, links, classes) {
            return region;
        }
    }
}

/// Substochastic matrix with random sparsity and row sums in `[0, 0.95]`.
fn substochastic(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut row: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.6) { rng.random::<f64>() } else { 0.0 }).collect();
        let s: f64 = row.iter().sum();
        let target = rng.random_range(0.0..0.95);
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v *= target / s);
        }
        for j in 0..n {
            p[(i, j)] = row[j];
        }
    }
    p
}

fn c01_pf_fig1() -> Outcome {
    let region = CapacityRegion::two_link_three_class();
    let res = pf_allocate(&region, &[1.0, 1.0, 1.0]).unwrap();
    let target = [2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0];
    let err = res.rates.iter().zip(target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    // Exhaustive grid at step 1e-3: for fixed λ3 the objective separates in λ1 and λ2.
    let step = 1e-3;
    let (mut best, mut arg) = (f64::NEG_INFINITY, [0.0; 3]);
    for k3 in 1..1000 {
        let l3 = k3 as f64 * step;
        let mut best12 = (f64::NEG_INFINITY, 0.0);
        for k in 1..1000 {
            let l = k as f64 * step;
            if l + l3 > 1.0 + 1e-12 {
                break;
            }
            if l.ln() > best12.0 {
                best12 = (l.ln(), l);
            }
        }
        let v = 2.0 * best12.0 + l3.ln();
        if v > best {
            best = v;
            arg = [best12.1, best12.1, l3];
        }
    }
    let grid_err = arg.iter().zip(target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    outcome(
        err <= 1e-7 && res.kkt_residual <= 1e-9 && grid_err <= 1e-3,
        format!("max error {err:.2e}, KKT residual {:.2e}, grid argmax {arg:?} off by {grid_err:.1e}", res.kkt_residual),
    )
}

fn c02_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let region = random_instance_region(&mut rng);
        let n = region.num_classes();
        let x = point(&mut rng, n, 0.5, 5.0);
        let g = pf_gradient(&region, &x).unwrap();
        for r in 0..n {
            let (mut up, mut dn) = (x.clone(), x.clone());
            up[r] += 1e-4;
            dn[r] -= 1e-4;
            let fd = (legendre(&region, &up).unwrap() - legendre(&region, &dn).unwrap()) / 2e-4;
            worst = worst.max((fd - g[r]).abs());
        }
    }
    outcome(worst <= 1e-3, format!("200 instances, max |finite difference - log rate| = {worst:.2e}"))
}

fn c03_difference_quotients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = f64::INFINITY;
    for _ in 0..1000 {
        let region = random_instance_region(&mut rng);
        let n = region.num_classes();
        let x = point(&mut rng, n, 0.2, 6.0);
        let d = legendre(&region, &x).unwrap();
        let rates: Vec<f64> = (0..n)
            .map(|r| {
                let eps = rng.random_range(1e-3..=x[r]);
                let mut y = x.clone();
                y[r] -= eps;
                ((d - legendre(&region, &y).unwrap()) / eps).exp()
            })
            .collect();
        worst = worst.min(region.min_slack(&rates).unwrap());
    }
    outcome(worst >= -1e-8, format!("1000 draws, min slack {worst:.3e}"))
}

fn c04_pf_prime_detailed_balance() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut names = vec![];
    for sc in scenarios(&["a1", "a2", "b-", "c-", "d-"]) {
        let ctx = LyapunovContext::new(sc.region.clone(), sc.model.rho().to_vec()).unwrap();
        let d = pf_prime_stationary(&ctx, 6).unwrap();
        worst = worst.max(detailed_balance_residual(&d, &sc.model, &PfPrime::new(sc.region.clone())).unwrap());
        names.push(sc.name);
    }
    outcome(worst <= 1e-9, format!("{} scenarios on [0, 6]^R, max relative residual {worst:.2e}", names.len()))
}

fn c05_sandwich() -> Outcome {
    let mut worst = f64::NEG_INFINITY;
    for sc in scenarios(&["a1", "a2", "b-", "c-"]) {
        let rep = sandwich_report(&build_balance_table(&sc.region, 8).unwrap()).unwrap();
        worst = worst.max(rep.lower).max(rep.upper);
    }
    let link = CapacityRegion::single_link(2, 1.0).unwrap();
    let table = build_balance_table(&link, 1).unwrap();
    let spot = table.phi(&[1, 1]).unwrap() - legendre(&link, &[1.0, 1.0]).unwrap();
    outcome(
        worst <= 1e-7 && (spot - 0.6931).abs() < 5e-5 && (0.0..=2.0).contains(&spot),
        format!("max violation {worst:.2e} on [0, 8]^R; unit link phi - conjugate at (1, 1) = {spot:.6}"),
    )
}

fn c06_scaling() -> Outcome {
    let link = CapacityRegion::single_link(2, 1.0).unwrap();
    let rows = ld_convergence_report(&link, &[1, 1], &[1, 2, 5, 10, 20, 50]).unwrap();
    let within = rows.iter().all(|r| r.within && r.gap >= 0.0 && r.gap <= r.bound);
    let g = |n: u32| rows.iter().find(|r| r.n == n).unwrap().gap;
    // Closed form on a unit link: exp(-phi(n, n)) = C(2n, n).
    let mut closed_err: f64 = 0.0;
    for r in &rows {
        let n = r.n as f64;
        let log_binom: f64 = (1..=r.n).map(|k| ((r.n + k) as f64 / k as f64).ln()).sum();
        let expected = -log_binom / n + 2.0 * 2f64.ln();
        closed_err = closed_err.max((expected - r.gap).abs());
    }
    outcome(
        within && g(50) < g(5) && closed_err <= 1e-9,
        format!("g(5) = {:.5}, g(50) = {:.5}, window holds: {within}, binomial mismatch {closed_err:.1e}", g(5), g(50)),
    )
}

fn c07_drift_functional() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut neg, mut mono, mut tanh_neg): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..10_000 {
        let n = rng.random_range(1..=5);
        let p = substochastic(&mut rng, n);
        let u = point(&mut rng, n, -3.0, 3.0);
        let plus: Vec<f64> = u.iter().map(|v| v.max(0.0)).collect();
        let f = drift_functional_all(&p, &u, f64::exp_m1).unwrap();
        let fp = drift_functional_all(&p, &plus, f64::exp_m1).unwrap();
        let ft = drift_functional_all(&p, &u, f64::tanh).unwrap();
        for r in 0..n {
            neg = neg.max(-f[r]);
            mono = mono.max(fp[r] - f[r]);
            tanh_neg = tanh_neg.max(-ft[r]);
        }
    }
    // Near-zero instances: u vanishes or is negative on the classes reachable
    // from r, with anything elsewhere.
    let (mut triggered, mut violations) = (0, 0);
    for _ in 0..100 {
        let n = rng.random_range(2..=5);
        let p = substochastic(&mut rng, n);
        let visits = visit_matrix(&p).unwrap();
        let r = rng.random_range(0..n);
        let u: Vec<f64> = (0..n)
            .map(|s| {
                if visits[(r, s)] > 1e-9 {
                    rng.random_range(-1e-9..1e-9)
                } else {
                    rng.random_range(-3.0..3.0)
                }
            })
            .collect();
        let f = drift_functional_all(&p, &u, f64::exp_m1).unwrap()[r];
        if f <= 1e-12 {
            triggered += 1;
            if (0..n).any(|s| visits[(r, s)] > 1e-9 && u[s] > 1e-6) {
                violations += 1;
            }
        }
    }
    outcome(
        neg <= 1e-12 && mono <= 1e-12 && tanh_neg <= 1e-12 && triggered == 100 && violations == 0,
        format!(
            "1e4 instances: max -F {neg:.1e}, max F(u+) - F(u) {mono:.1e}, tanh max -F {tanh_neg:.1e}; equality case {triggered}/100 triggered, {violations} violations"
        ),
    )
}

fn c08_excursions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=6);
        let p = substochastic(&mut rng, n);
        let nu_bar = point(&mut rng, n, 0.0, 1.0);
        let model = TrafficModel::new(nu_bar, vec![1.0; n], p).unwrap();
        let mask = rng.random_range(1u32..(1 << n) - 1);
        let removed: Vec<usize> = (0..n).filter(|r| mask & (1 << r) != 0).collect();
        let exc = remove_excursions(&model, &removed).unwrap();
        worst = worst.max(exc.identity_residual(model.nu()).unwrap());
    }
    outcome(worst <= 1e-10, format!("1000 (model, removed set) pairs, max residual {worst:.2e}"))
}

fn c09_second_order() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let region = random_instance_region(&mut rng);
        let x = point(&mut rng, region.num_classes(), 0.5, 5.0);
        let h: Vec<f64> = x.iter().map(|&v| rng.random_range(-v..v)).collect();
        worst = worst.max(second_order_residual(&region, &x, &h).unwrap());
    }
    outcome(worst <= 1e-7, format!("1000 (region, x, h), max residual {worst:.2e}"))
}

fn c10_phase_loads() -> Outcome {
    let region = CapacityRegion::single_link(2, 1.0).unwrap();
    let model = TrafficModel::without_routing(vec![0.3, 0.2], vec![1.0, 1.0]).unwrap();
    let mu = 2.0;
    let erlang = PhaseType::erlang(2, mu).unwrap();
    let hyper = PhaseType::hyperexponential(vec![0.5, 0.5], vec![1.0, 2.0]).unwrap();
    let exp = expand_phase_type(&region, &model, &[erlang, hyper]).unwrap();
    let loads = exp.class_loads();
    let want = [0.3 * 2.0 / mu, 0.2 * 0.75];
    let err = loads.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    outcome(err <= 1e-12, format!("Erlang-2 load {:.12}, hyperexponential load {:.12}, max error {err:.1e}", loads[0], loads[1]))
}

fn c11_fluid_descent() -> Outcome {
    let mut ok = true;
    let mut parts = vec![];
    for sc in scenarios(&["a1", "a2", "b-", "c-"]) {
        let ctx = LyapunovContext::new(sc.region.clone(), sc.model.rho().to_vec()).unwrap();
        assert!(ctx.is_stable());
        let n = sc.num_classes();
        let l1 = ctx.value(&vec![1.0; n]).unwrap();
        let x0 = vec![1.0 / l1; n];
        let traj = integrate_until_level(&sc.region, &sc.model, &x0, 1e-3, 0.01, 500.0).unwrap();
        let rep = descent_report(&traj, &ctx).unwrap();
        let l_end = *traj.lyapunov().last().unwrap();
        let h_max = traj
            .states
            .iter()
            .zip(&traj.drifts)
            .filter(|(x, _)| x.iter().any(|&v| v > 0.0))
            .map(|(_, d)| d.h_bound)
            .fold(f64::NEG_INFINITY, f64::max);
        ok &= rep.monotone && rep.max_increase <= rep.tolerance && l_end <= 0.01 && h_max < 0.0;
        parts.push(format!("{}: T = {:.3}, L(T) = {l_end:.2e}, max h_bound {h_max:.2e}", sc.name, traj.times.last().unwrap()));
    }
    outcome(ok, parts.join("; "))
}

fn c12_fluid_limit() -> Outcome {
    let (m50, m200) = fluid_limit_medians(0.1, 0.5, 1.0, 12, 20).unwrap();
    outcome(
        m200 < m50 && m200 <= 0.1,
        format!("nu_bar 0.1, start 0.5: median sup distance z = 50: {m50:.4}, z = 200: {m200:.4}"),
    )
}

fn c13_oracles() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut cases = Vec::new();
    let mut both = scenarios(&["a1", "a2", "b-", "c-"]);
    both.extend(scenarios(&["e-reversible-routing"]));
    for sc in both {
        let ctx = LyapunovContext::new(sc.region.clone(), sc.model.rho().to_vec()).unwrap();
        let table = Arc::new(build_balance_table(&sc.region, 6).unwrap());
        let bf_tv = total_variation(
            &truncated_exact(&sc.model, &Bf::new(table.clone()), 6).unwrap(),
            &bf_stationary(&table, &ctx, 6).unwrap(),
        )
        .unwrap();
        worst = worst.max(bf_tv);
        cases.push(format!("{} BF {bf_tv:.1e}", sc.name));
        if !sc.model.has_routing() {
            let pfp_tv = total_variation(
                &truncated_exact(&sc.model, &PfPrime::new(sc.region.clone()), 6).unwrap(),
                &pf_prime_stationary(&ctx, 6).unwrap(),
            )
            .unwrap();
            worst = worst.max(pfp_tv);
            cases.push(format!("PF' {pfp_tv:.1e}"));
        }
    }
    outcome(worst <= 1e-9, format!("max TV {worst:.2e} ({})", cases.join(", ")))
}

fn c14_insensitivity() -> Outcome {
    let tv = insensitivity_gap(14, 1_000_000).unwrap();
    outcome(tv <= 0.02, format!("TV between Erlang-2 and exponential class-count laws, 1e6 events each: {tv:.4}"))
}

fn c15_mm1() -> Outcome {
    let d = mm1_occupancy(15).unwrap();
    let w: Vec<f64> = (0..=30).map(|k| 0.5f64.powi(k)).collect();
    let tv = total_variation(&d, &StateDistribution::from_weights(LatticeBox::new(1, 30), w).unwrap()).unwrap();
    outcome(tv <= 0.02, format!("TV to truncated geometric(1/2): {tv:.4}"))
}

/// Least-squares slope and R² of `L(X(t))` for PF on the two-link region
/// with loads outside the capacity region.
fn c16_unstable_growth() -> Outcome {
    let region = CapacityRegion::two_link_three_class();
    let model = TrafficModel::without_routing(vec![0.7, 0.7, 0.4], vec![1.0; 3]).unwrap();
    let ctx = LyapunovContext::new(region.clone(), model.rho().to_vec()).unwrap();
    let t_end = 2000.0;
    let opts = SimOptions { box_bound: 1, ..SimOptions::default() };
    let run = simulate(&model, &Pf::new(region), t_end, 16, &[0, 0, 0], opts).unwrap();
    let times: Vec<f64> = (1..=200).map(|k| t_end * k as f64 / 200.0).collect();
    let states = run.sample(&times).unwrap();
    let l: Vec<f64> = states
        .iter()
        .map(|x| ctx.value(&x.iter().map(|&v| v as f64).collect::<Vec<_>>()).unwrap())
        .collect();
    let m = times.len() as f64;
    let (tm, lm) = (times.iter().sum::<f64>() / m, l.iter().sum::<f64>() / m);
    let sxy: f64 = times.iter().zip(&l).map(|(t, v)| (t - tm) * (v - lm)).sum();
    let sxx: f64 = times.iter().map(|t| (t - tm).powi(2)).sum();
    let syy: f64 = l.iter().map(|v| (v - lm).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = sxy * sxy / (sxx * syy);
    let total: u32 = states.last().unwrap().iter().sum();
    outcome(
        slope > 0.0 && r2 > 0.9,
        format!("L(X(t)) least-squares slope {slope:.4}, R^2 {r2:.4}; population at t = {t_end}: {total}"),
    )
}

#[test]
fn acceptance_criteria() {
    let criteria: [(u32, &str, Criterion, f64, bool); 16] = [
        (1, "PF allocation on the two-link region", c01_pf_fig1, 1.0, true),
        (2, "conjugate gradient equals PF log rates", c02_gradient, 30.0, true),
        (3, "difference-quotient rates are feasible", c03_difference_quotients, 30.0, true),
        (4, "PF' detailed balance", c04_pf_prime_detailed_balance, 60.0, true),
        (5, "balance function sandwich", c05_sandwich, 120.0, true),
        (6, "balance function scaling limit", c06_scaling, 10.0, true),
        (7, "drift functional properties", c07_drift_functional, 30.0, true),
        (8, "excursion removal identity", c08_excursions, 10.0, true),
        (9, "second-order conjugate bound", c09_second_order, 30.0, true),
        (10, "phase-type class loads", c10_phase_loads, 1.0, true),
        (11, "fluid Lyapunov descent", c11_fluid_descent, 60.0, true),
        (12, "fluid-limit correspondence", c12_fluid_limit, 300.0, true),
        (13, "closed-form vs exact stationary laws", c13_oracles, 120.0, true),
        (14, "PF' insensitivity", c14_insensitivity, 300.0, true),
        (15, "M/M/1-PS occupancy law", c15_mm1, 120.0, true),
        (16, "unstable PF Lyapunov growth (diagnostic)", c16_unstable_growth, f64::INFINITY, false),
    ];
    let mut failed = vec![];
    for (id, title, f, limit, gating) in criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f));
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            Ok(o) => (o.pass && secs < limit, o.detail),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        let label = match (gating, pass) {
            (true, true) => "PASS",
            (true, false) => "FAIL",
            (false, true) => "DIAG ok",
            (false, false) => "DIAG not observed",
        };
        let budget = if limit.is_finite() { format!(" (limit {limit:.0} s)") } else { String::new() };
        // Written past the test harness capture so the report shows up on success too.
        let _ = writeln!(std::io::stderr(), "criterion {id:2} {label}: {title}: {detail} [{secs:.2} s{budget}]");
        if gating && !pass {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
