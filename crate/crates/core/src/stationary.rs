//! Stationary measures on lattice boxes: the closed forms for PF′ and
//! balanced fairness, a truncated-generator oracle for any allocator, and
//! empirical occupancy from simulation runs.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::allocators::{Allocator, BalanceTable};
use crate::dynamics::{transition_rates, SimulationRun};
use crate::error::{check_dim, Error, Result};
use crate::format::FloatFormat;
use crate::lattice::LatticeBox;
use crate::linalg::logsumexp;
use crate::lyapunov::{harmonic_remainder, LyapunovContext};
use crate::pf_solver::legendre;
use crate::traffic::TrafficModel;

/// Largest box handled by [`truncated_exact`].
pub const EXACT_BUDGET: usize = 1 << 16;
/// Below this many states [`truncated_exact`] uses a dense solve.
pub const DENSE_LIMIT: usize = 1 << 12;
/// Floor for residual denominators.
pub const RESIDUAL_FLOOR: f64 = 1e-300;

/// A probability vector over `[0, N]^R`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDistribution {
    lattice: LatticeBox,
    mass: Vec<f64>,
    log_weights: Option<Vec<f64>>,
    log_z: f64,
    /// Mass observed outside the box before normalisation (empirical runs only).
    pub leakage: f64,
    pub warnings: Vec<String>,
}

impl StateDistribution {
    /// Normalises `exp(log_weights)` with a single max shift.
    pub fn from_log_weights(lattice: LatticeBox, log_weights: Vec<f64>) -> Result<Self> {
        if log_weights.len() != lattice.len() {
            return Err(Error::DimensionMismatch { expected: lattice.len(), got: log_weights.len() });
        }
        if log_weights.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::InvalidArgument("log-weights must be finite or -inf".into()));
        }
        let log_z = logsumexp(log_weights.iter().copied());
        if !log_z.is_finite() {
            return Err(Error::InvalidArgument("all weights vanish".into()));
        }
        let mass = log_weights.iter().map(|w| (w - log_z).exp()).collect();
        Ok(StateDistribution { lattice, mass, log_weights: Some(log_weights), log_z, leakage: 0.0, warnings: Vec::new() })
    }

    /// Normalises nonnegative weights.
    pub fn from_weights(lattice: LatticeBox, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != lattice.len() {
            return Err(Error::DimensionMismatch { expected: lattice.len(), got: weights.len() });
        }
        if weights.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("all weights vanish".into()));
        }
        let mass = weights.iter().map(|w| w / total).collect();
        Ok(StateDistribution { lattice, mass, log_weights: None, log_z: total.ln(), leakage: 0.0, warnings: Vec::new() })
    }

    pub fn point_mass(lattice: LatticeBox, x: &[u32]) -> Result<Self> {
        let i = lattice
            .index(x)
            .ok_or_else(|| Error::OutOfBox { state: x.to_vec(), bound: lattice.bound() })?;
        let mut w = vec![0.0; lattice.len()];
        w[i] = 1.0;
        Self::from_weights(lattice, w)
    }

    pub fn lattice(&self) -> LatticeBox {
        self.lattice
    }

    pub fn bound(&self) -> u32 {
        self.lattice.bound()
    }

    pub fn dim(&self) -> usize {
        self.lattice.dim()
    }

    /// Masses in lattice index order.
    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    /// Unnormalised log-weights, when the distribution was built from them.
    pub fn log_weights(&self) -> Option<&[f64]> {
        self.log_weights.as_deref()
    }

    /// `log Z`, the log of the normalising constant.
    pub fn log_normalizer(&self) -> f64 {
        self.log_z
    }

    /// Probability of `x`; zero outside the box.
    pub fn mass(&self, x: &[u32]) -> f64 {
        self.lattice.index(x).map_or(0.0, |i| self.mass[i])
    }

    /// Log-probability of `x`, computed from log-weights when available.
    pub fn log_mass(&self, x: &[u32]) -> f64 {
        match self.lattice.index(x) {
            None => f64::NEG_INFINITY,
            Some(i) => match &self.log_weights {
                Some(lw) => lw[i] - self.log_z,
                None => self.mass[i].ln(),
            },
        }
    }

    /// Marginal law of class `r` on `0..=N`.
    pub fn marginal(&self, r: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.bound() as usize + 1];
        for (i, x) in self.lattice.points().enumerate() {
            out[x[r] as usize] += self.mass[i];
        }
        out
    }

    /// Sum of masses (1 up to rounding).
    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// `(x, mass)` pairs in index order.
    pub fn entries(&self) -> impl Iterator<Item = (Vec<u32>, f64)> + '_ {
        self.lattice.points().zip(self.mass.iter().copied())
    }
}

impl StateDistribution {
    /// CSV with columns `x_1..x_R, mass`.
    pub fn write_csv<W: std::io::Write>(&self, out: W, fmt: FloatFormat) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (1..=self.dim()).map(|r| format!("x_{r}")).collect();
        header.push("mass".into());
        w.write_record(&header)?;
        for (x, m) in self.entries() {
            let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            rec.push(fmt.fmt(m));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `(1/2) Σ |d1 - d2|` over a common box.
pub fn total_variation(d1: &StateDistribution, d2: &StateDistribution) -> Result<f64> {
    if d1.lattice != d2.lattice {
        return Err(Error::InvalidArgument(format!(
            "box mismatch: [0, {}]^{} vs [0, {}]^{}",
            d1.bound(),
            d1.dim(),
            d2.bound(),
            d2.dim()
        )));
    }
    let s: f64 = d1.mass.iter().zip(&d2.mass).map(|(a, b)| (a - b).abs()).sum();
    Ok((0.5 * s).min(1.0))
}

fn load_terms(rho: &[f64], x: &[u32]) -> f64 {
    let mut s = 0.0;
    for (&xr, &rr) in x.iter().zip(rho) {
        if xr > 0 {
            if rr == 0.0 {
                return f64::NEG_INFINITY;
            }
            s += xr as f64 * rr.ln();
        }
    }
    s
}

fn stability_warning(ctx: &LyapunovContext) -> Vec<String> {
    if ctx.is_stable() {
        Vec::new()
    } else {
        vec!["loads lie outside the interior of the capacity region; the measure is not summable on Z_+^R".into()]
    }
}

/// `π(x) ∝ exp(-L(x))` on `[0, N]^R`.
pub fn pf_prime_stationary(ctx: &LyapunovContext, bound: u32) -> Result<StateDistribution> {
    let region = ctx.region();
    let lattice = LatticeBox::with_budget(region.num_classes(), bound, EXACT_BUDGET * 64)?;
    let mut lw = Vec::with_capacity(lattice.len());
    for x in lattice.points() {
        let lin = load_terms(ctx.rho(), &x);
        if lin == f64::NEG_INFINITY {
            lw.push(lin);
            continue;
        }
        let real: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        lw.push(lin - legendre(region, &real)?);
    }
    let mut d = StateDistribution::from_log_weights(lattice, lw)?;
    d.warnings = stability_warning(ctx);
    Ok(d)
}

/// `π(x) ∝ exp(-φ(x) + Σ x_r log ρ_r)` on `[0, N]^R`.
pub fn bf_stationary(table: &BalanceTable, ctx: &LyapunovContext, bound: u32) -> Result<StateDistribution> {
    if table.region() != ctx.region() {
        return Err(Error::InvalidArgument("balance table and loads refer to different regions".into()));
    }
    if bound > table.bound() {
        return Err(Error::InvalidArgument(format!(
            "balance table covers [0, {}]^R but [0, {bound}]^R was requested",
            table.bound()
        )));
    }
    let lattice = LatticeBox::new(ctx.region().num_classes(), bound);
    let lw = lattice
        .points()
        .map(|x| Ok(load_terms(ctx.rho(), &x) - table.phi(&x)?))
        .collect::<Result<Vec<f64>>>()?;
    let mut d = StateDistribution::from_log_weights(lattice, lw)?;
    d.warnings = stability_warning(ctx);
    Ok(d)
}

/// Largest relative gap in `π(x + e_r) μ_r λ_r(x + e_r) = π(x) ν_r` over
/// box edges. Requires a model without routing.
pub fn detailed_balance_residual(
    dist: &StateDistribution,
    model: &TrafficModel,
    allocator: &dyn Allocator,
) -> Result<f64> {
    let n = dist.dim();
    check_dim(n, model.num_classes())?;
    check_dim(n, allocator.num_classes())?;
    if model.has_routing() {
        return Err(Error::InvalidArgument("detailed balance is checked only for models without routing".into()));
    }
    let lattice = dist.lattice();
    let mut worst: f64 = 0.0;
    for y in lattice.points() {
        if y.iter().all(|&v| v == 0) {
            continue;
        }
        let rates = allocator
            .rates(&y)
            .map_err(|e| Error::AllocatorAt { state: y.clone(), source: Box::new(e) })?;
        let log_up = dist.log_mass(&y);
        let mut x = y.clone();
        for r in 0..n {
            if y[r] == 0 {
                continue;
            }
            x[r] -= 1;
            let log_down = dist.log_mass(&x);
            let down = model.nu()[r];
            let up = model.mu()[r] * rates[r];
            // Ratio form keeps relative precision for tiny masses.
            let rel = if log_down == f64::NEG_INFINITY || down == 0.0 {
                let lhs = log_up.exp() * up;
                lhs / RESIDUAL_FLOOR.max(log_down.exp() * down)
            } else {
                ((log_up - log_down).exp() * up / down - 1.0).abs()
            };
            worst = worst.max(rel);
            x[r] += 1;
        }
    }
    Ok(worst)
}

/// Sparse generator on a box, with transitions leaving the box dropped.
struct Generator {
    lattice: LatticeBox,
    rows: Vec<Vec<(usize, f64)>>,
    exit: Vec<f64>,
}

impl Generator {
    fn build(model: &TrafficModel, allocator: &dyn Allocator, bound: u32) -> Result<Self> {
        let n = model.num_classes();
        check_dim(n, allocator.num_classes())?;
        let lattice = LatticeBox::with_budget(n, bound, EXACT_BUDGET)?;
        let mut rows = Vec::with_capacity(lattice.len());
        let mut exit = Vec::with_capacity(lattice.len());
        for x in lattice.points() {
            let mut row: Vec<(usize, f64)> = Vec::new();
            for (tr, q) in transition_rates(model, allocator, &x)? {
                let mut y = x.clone();
                tr.apply(&mut y);
                if let Some(j) = lattice.index(&y) {
                    match row.iter_mut().find(|(k, _)| *k == j) {
                        Some(e) => e.1 += q,
                        None => row.push((j, q)),
                    }
                }
            }
            exit.push(row.iter().map(|(_, q)| q).sum());
            rows.push(row);
        }
        Ok(Generator { lattice, rows, exit })
    }

    /// `πQ`.
    fn apply_left(&self, pi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; pi.len()];
        for (i, row) in self.rows.iter().enumerate() {
            out[i] -= pi[i] * self.exit[i];
            for &(j, q) in row {
                out[j] += pi[i] * q;
            }
        }
        out
    }

    fn reachable(&self, adj: &[Vec<usize>]) -> usize {
        let mut seen = vec![false; adj.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
        count
    }

    fn check_irreducible(&self) -> Result<()> {
        let m = self.rows.len();
        let fwd: Vec<Vec<usize>> = self.rows.iter().map(|r| r.iter().filter(|e| e.1 > 0.0).map(|e| e.0).collect()).collect();
        let mut bwd = vec![Vec::new(); m];
        for (i, r) in fwd.iter().enumerate() {
            for &j in r {
                bwd[j].push(i);
            }
        }
        let f = self.reachable(&fwd);
        let b = self.reachable(&bwd);
        if f < m || b < m {
            return Err(Error::Reducible(format!(
                "{} of {m} states reachable from 0, {} of {m} states reach 0",
                f, b
            )));
        }
        Ok(())
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Stationary law of the generator restricted to `[0, N]^R`, with jumps
/// leaving the box suppressed. Dense LU below [`DENSE_LIMIT`] states, power
/// iteration on the uniformised kernel above.
pub fn truncated_exact(model: &TrafficModel, allocator: &dyn Allocator, bound: u32) -> Result<StateDistribution> {
    let gen = Generator::build(model, allocator, bound)?;
    gen.check_irreducible()?;
    let m = gen.rows.len();
    let mut pi = if m < DENSE_LIMIT { dense_stationary(&gen)? } else { power_stationary(&gen)? };
    for v in pi.iter_mut() {
        *v = v.max(0.0);
    }
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|v| *v /= total);
    let residual = max_abs(&gen.apply_left(&pi));
    if residual > 1e-10 {
        return Err(Error::Convergence(format!("stationary residual {residual:e} exceeds 1e-10")));
    }
    StateDistribution::from_weights(gen.lattice, pi)
}

fn dense_stationary(gen: &Generator) -> Result<Vec<f64>> {
    let m = gen.rows.len();
    // Qᵀ π = 0 with the last equation replaced by Σ π = 1.
    let mut a = DMatrix::<f64>::zeros(m, m);
    for (i, row) in gen.rows.iter().enumerate() {
        a[(i, i)] -= gen.exit[i];
        for &(j, q) in row {
            a[(j, i)] += q;
        }
    }
    for i in 0..m {
        a[(m - 1, i)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(m);
    b[m - 1] = 1.0;
    let lu = a.clone().lu();
    let mut x = lu
        .solve(&b)
        .ok_or_else(|| Error::Convergence("singular truncated generator".into()))?;
    // One step of iterative refinement.
    let r = &b - &a * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    Ok(x.iter().copied().collect())
}

fn power_stationary(gen: &Generator) -> Result<Vec<f64>> {
    let m = gen.rows.len();
    let lambda = 1.05 * gen.exit.iter().fold(0.0f64, |a, &b| a.max(b)).max(1e-300);
    let mut pi = vec![1.0 / m as f64; m];
    for _ in 0..2_000_000 {
        let q = gen.apply_left(&pi);
        let mut change = 0.0;
        for i in 0..m {
            let d = q[i] / lambda;
            pi[i] += d;
            change += d.abs();
        }
        if change < 1e-12 {
            return Ok(pi);
        }
    }
    Err(Error::Convergence("power iteration did not reach 1e-12 in 2e6 sweeps".into()))
}

/// `max_x |(πQ)(x)|` for the box-truncated generator.
pub fn global_balance_residual(dist: &StateDistribution, model: &TrafficModel, allocator: &dyn Allocator) -> Result<f64> {
    let gen = Generator::build(model, allocator, dist.bound())?;
    if gen.lattice != dist.lattice() {
        return Err(Error::InvalidArgument("distribution and model have different dimensions".into()));
    }
    Ok(max_abs(&gen.apply_left(dist.masses())))
}

/// Time-weighted occupancy of `run` on its recording box after `burn_in`.
pub fn empirical_distribution(run: &SimulationRun, burn_in: f64) -> Result<StateDistribution> {
    let dim = run.x0.len();
    empirical_distribution_with(run, burn_in, dim, |x| x.to_vec())
}

/// Like [`empirical_distribution`], after mapping each state through
/// `project` into `dim` coordinates (for instance to aggregate phases).
pub fn empirical_distribution_with<F>(run: &SimulationRun, burn_in: f64, dim: usize, project: F) -> Result<StateDistribution>
where
    F: Fn(&[u32]) -> Vec<u32>,
{
    if !(burn_in >= 0.0 && burn_in < run.t_end) {
        return Err(Error::InvalidArgument(format!("burn-in {burn_in} must lie in [0, {})", run.t_end)));
    }
    let lattice = LatticeBox::new(dim, run.options.box_bound);
    let mut weights = vec![0.0; lattice.len()];
    let mut leakage = 0.0;
    let mut credit = |x: &[u32], dt: f64, leak_in: bool| {
        if leak_in {
            leakage += dt;
            return;
        }
        match lattice.index(&project(x)) {
            Some(i) => weights[i] += dt,
            None => leakage += dt,
        }
    };
    if burn_in == run.options.burn_in {
        for (x, &dt) in &run.occupancy {
            credit(x, dt, false);
        }
        credit(&[], run.leakage, true);
    } else {
        if !run.options.record_events {
            return Err(Error::InvalidArgument("a different burn-in needs the event log".into()));
        }
        let path = run.path();
        for (k, (t, x)) in path.iter().enumerate() {
            let end = path.get(k + 1).map_or(run.t_end, |p| p.0);
            let from = t.max(burn_in);
            if end > from {
                credit(x, end - from, false);
            }
        }
    }
    let recorded: f64 = weights.iter().sum::<f64>() + leakage;
    if recorded <= 0.0 {
        return Err(Error::InvalidArgument("no time recorded after burn-in".into()));
    }
    let box_time: f64 = weights.iter().sum();
    if box_time <= 0.0 {
        return Err(Error::InvalidArgument("the run never visited the recording box after burn-in".into()));
    }
    let mut d = StateDistribution::from_weights(lattice, weights)?;
    d.leakage = leakage / recorded;
    if d.leakage > 0.01 {
        d.warnings.push(format!("{:.2}% of the time was spent outside the recording box", 100.0 * d.leakage));
    }
    Ok(d)
}

/// One row of the finite-`n` large-deviations window check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LdWindowRow {
    pub n: u32,
    /// `-(1/n) log π^BF(nx) - L(x)`.
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub within: bool,
}

/// Checks `-(1/n) log π^BF(nx) - L(x) ∈ [log Z / n, (log Z + r(nx)) / n]`,
/// where `Z` is the normaliser of `π^BF` on the table's box.
pub fn ld_window_report(table: &BalanceTable, ctx: &LyapunovContext, x: &[u32], n_list: &[u32]) -> Result<Vec<LdWindowRow>> {
    check_dim(ctx.region().num_classes(), x.len())?;
    let dist = bf_stationary(table, ctx, table.bound())?;
    let log_z = dist.log_normalizer();
    let real: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let l = ctx.value(&real)?;
    let mut rows = Vec::with_capacity(n_list.len());
    for &n in n_list {
        if n == 0 {
            return Err(Error::InvalidArgument("scales must be positive".into()));
        }
        let nx: Vec<u32> = x.iter().map(|&v| v * n).collect();
        let lp = dist.log_mass(&nx);
        if lp == f64::NEG_INFINITY && !dist.lattice().contains(&nx) {
            return Err(Error::OutOfBox { state: nx, bound: table.bound() });
        }
        let nf = n as f64;
        let value = -lp / nf - l;
        let lower = log_z / nf;
        let upper = (log_z + harmonic_remainder(&nx)) / nf;
        let tol = 1e-9 * (1.0 + value.abs());
        rows.push(LdWindowRow { n, value, lower, upper, within: value >= lower - tol && value <= upper + tol });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocators::{build_balance_table, Bf, Pf, PfPrime};
    use crate::capacity::CapacityRegion;
    use crate::dynamics::{simulate, SimOptions};
    use std::sync::Arc;

    fn geometric(rho: f64, n: u32) -> StateDistribution {
        let w = (0..=n).map(|k| rho.powi(k as i32)).collect();
        StateDistribution::from_weights(LatticeBox::new(1, n), w).unwrap()
    }

    #[test]
    fn pf_prime_single_class_is_geometric() {
        let region = CapacityRegion::single_link(1, 1.0).unwrap();
        let ctx = LyapunovContext::new(region, vec![0.5]).unwrap();
        let d = pf_prime_stationary(&ctx, 20).unwrap();
        assert!(total_variation(&d, &geometric(0.5, 20)).unwrap() < 1e-12);
        let norm = 1.0 / (1.0 - 0.5f64.powi(21)) * 0.5;
        assert!((d.mass(&[0]) - norm).abs() < 1e-12);
        let p0 = pf_prime_stationary(&ctx, 0).unwrap();
        assert_eq!(p0.masses(), &[1.0]);
    }

    #[test]
    fn bf_two_classes_is_binomial_weighted() {
        let region = CapacityRegion::single_link(2, 1.0).unwrap();
        let ctx = LyapunovContext::new(region.clone(), vec![0.3, 0.3]).unwrap();
        let table = build_balance_table(&region, 8).unwrap();
        let d = bf_stationary(&table, &ctx, 8).unwrap();
        let lattice = LatticeBox::new(2, 8);
        let w = lattice
            .points()
            .map(|x| {
                let (a, b) = (x[0] as u64, x[1] as u64);
                let mut c = 1.0;
                for k in 0..a {
                    c *= (a + b - k) as f64 / (k + 1) as f64;
                }
                c * 0.3f64.powi((a + b) as i32)
            })
            .collect();
        let oracle = StateDistribution::from_weights(lattice, w).unwrap();
        assert!(total_variation(&d, &oracle).unwrap() < 1e-12);
    }

    #[test]
    fn bf_and_pf_prime_agree_for_one_class() {
        let region = CapacityRegion::single_link(1, 2.0).unwrap();
        let ctx = LyapunovContext::new(region.clone(), vec![1.2]).unwrap();
        let table = build_balance_table(&region, 15).unwrap();
        let a = bf_stationary(&table, &ctx, 15).unwrap();
        let b = pf_prime_stationary(&ctx, 15).unwrap();
        assert!(total_variation(&a, &b).unwrap() < 1e-12);
    }

    #[test]
    fn reversibility_of_closed_forms() {
        let region = CapacityRegion::two_link_three_class();
        let rho = vec![0.3, 0.25, 0.2];
        let model = TrafficModel::without_routing(rho.clone(), vec![1.0; 3]).unwrap();
        let ctx = LyapunovContext::new(region.clone(), rho).unwrap();
        let pfp = pf_prime_stationary(&ctx, 4).unwrap();
        let res = detailed_balance_residual(&pfp, &model, &PfPrime::new(region.clone())).unwrap();
        assert!(res <= 1e-9, "PF' residual {res}");
        let table = Arc::new(build_balance_table(&region, 4).unwrap());
        let bf = bf_stationary(&table, &ctx, 4).unwrap();
        let res = detailed_balance_residual(&bf, &model, &Bf::new(table)).unwrap();
        assert!(res <= 1e-9, "BF residual {res}");
        let res = detailed_balance_residual(&pfp, &model, &Pf::new(region)).unwrap();
        assert!(res > 1e-3, "PF should not balance, residual {res}");
    }

    #[test]
    fn truncated_oracle_matches_closed_forms() {
        let region = CapacityRegion::single_link(1, 1.0).unwrap();
        let model = TrafficModel::without_routing(vec![0.5], vec![1.0]).unwrap();
        let d = truncated_exact(&model, &Pf::new(region), 20).unwrap();
        assert!(total_variation(&d, &geometric(0.5, 20)).unwrap() < 1e-12);

        let region = CapacityRegion::two_link_three_class();
        let rho = vec![0.3, 0.25, 0.2];
        let model = TrafficModel::without_routing(rho.clone(), vec![1.0; 3]).unwrap();
        let ctx = LyapunovContext::new(region.clone(), rho).unwrap();
        let exact = truncated_exact(&model, &PfPrime::new(region.clone()), 4).unwrap();
        let closed = pf_prime_stationary(&ctx, 4).unwrap();
        assert!(total_variation(&exact, &closed).unwrap() < 1e-9);
    }

    #[test]
    fn total_variation_edge_cases() {
        let l = LatticeBox::new(2, 3);
        let a = StateDistribution::point_mass(l, &[0, 0]).unwrap();
        let b = StateDistribution::point_mass(l, &[1, 0]).unwrap();
        assert_eq!(total_variation(&a, &a).unwrap(), 0.0);
        assert_eq!(total_variation(&a, &b).unwrap(), 1.0);
        assert!(total_variation(&a, &geometric(0.5, 3)).is_err());
        // Geometric(1/2) truncated at 10 versus at 20, both on [0, 20].
        let mut w: Vec<f64> = (0..=20).map(|k| 0.5f64.powi(k)).collect();
        w[11..].iter_mut().for_each(|v| *v = 0.0);
        let g10 = StateDistribution::from_weights(LatticeBox::new(1, 20), w).unwrap();
        let tv = total_variation(&g10, &geometric(0.5, 20)).unwrap();
        assert!((tv - 4.878_046_454_451_778e-4).abs() < 1e-15, "{tv}");
    }

    #[test]
    fn reducible_chain_is_reported() {
        let region = CapacityRegion::single_link(2, 1.0).unwrap();
        let model = TrafficModel::without_routing(vec![0.5, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(matches!(truncated_exact(&model, &Pf::new(region), 3), Err(Error::Reducible(_))));
    }

    #[test]
    fn empirical_accounting() {
        let region = CapacityRegion::single_link(1, 1.0).unwrap();
        let model = TrafficModel::without_routing(vec![0.0], vec![1.0]).unwrap();
        let run = simulate(&model, &Pf::new(region.clone()), 50.0, 3, &[2], SimOptions::default()).unwrap();
        let late = empirical_distribution(&run, 49.0).unwrap();
        assert_eq!(late.mass(&[0]), 1.0);

        let model = TrafficModel::without_routing(vec![0.5], vec![1.0]).unwrap();
        let opts = SimOptions { box_bound: 3, ..SimOptions::default() };
        let run = simulate(&model, &Pf::new(region), 2000.0, 5, &[0], opts).unwrap();
        let d = empirical_distribution(&run, 0.0).unwrap();
        let box_time: f64 = run.occupancy.values().sum();
        assert!((box_time + run.leakage - 2000.0).abs() < 1e-9);
        assert!((d.leakage - run.leakage / 2000.0).abs() < 1e-12);
        let replay = empirical_distribution(&run, 100.0).unwrap();
        assert!(total_variation(&d, &replay).unwrap() < 0.05);
    }
}
