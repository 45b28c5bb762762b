//! The Lyapunov function `L(x) = δ*(x) - Σ x_r log ρ_r` and the
//! inequalities tying the conjugate `δ*` to the balance function `φ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::allocators::{BalanceTable, TABLE_BUDGET};
use crate::capacity::CapacityRegion;
use crate::error::{check_dim, Error, Result};
use crate::pf_solver::{legendre, pf_allocate, pf_gradient};

/// A region together with a load vector.
#[derive(Debug, Clone)]
pub struct LyapunovContext {
    region: CapacityRegion,
    rho: Vec<f64>,
    stable: bool,
}

impl LyapunovContext {
    pub fn new(region: CapacityRegion, rho: Vec<f64>) -> Result<Self> {
        check_dim(region.num_classes(), rho.len())?;
        if rho.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("loads must be finite and nonnegative".into()));
        }
        let stable = region.in_interior(&rho)?;
        Ok(LyapunovContext { region, rho, stable })
    }

    pub fn region(&self) -> &CapacityRegion {
        &self.region
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    /// Whether `ρ` lies in the interior of the capacity region.
    pub fn is_stable(&self) -> bool {
        self.stable
    }

    /// `L(x)`; `+∞` when some `x_r > 0` has `ρ_r = 0`.
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        lyapunov_value(self, x)
    }
}

/// `L(x) = δ*(x) - Σ_r x_r log ρ_r`, with `L(0) = 0`.
pub fn lyapunov_value(ctx: &LyapunovContext, x: &[f64]) -> Result<f64> {
    check_dim(ctx.rho.len(), x.len())?;
    let mut linear = 0.0;
    for (&xr, &rr) in x.iter().zip(&ctx.rho) {
        if xr > 0.0 {
            if rr == 0.0 {
                return Ok(f64::INFINITY);
            }
            linear += xr * rr.ln();
        }
    }
    Ok(legendre(&ctx.region, x)? - linear)
}

/// Sampled constants with `a ‖x‖∞ ≤ L(x) ≤ A ‖x‖∞`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormBounds {
    pub a_hat: f64,
    pub big_a_hat: f64,
}

/// Minimum and maximum of `L` over the unit vectors and `samples` random
/// points of the unit sup-norm sphere in the positive orthant.
pub fn norm_bounds_certificate(ctx: &LyapunovContext, samples: usize, seed: u64) -> Result<NormBounds> {
    if !ctx.stable {
        return Err(Error::InvalidArgument("norm bounds need loads in the interior of the capacity region".into()));
    }
    let n = ctx.rho.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut visit = |y: &[f64]| -> Result<()> {
        let v = lyapunov_value(ctx, y)?;
        lo = lo.min(v);
        hi = hi.max(v);
        Ok(())
    };
    for r in 0..n {
        let mut e = vec![0.0; n];
        e[r] = 1.0;
        visit(&e)?;
    }
    for _ in 0..samples {
        let mut y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        // Put the point on the sphere by pinning a random coordinate to 1.
        y[rng.random_range(0..n)] = 1.0;
        visit(&y)?;
    }
    if !(lo > 0.0) {
        return Err(Error::Convergence(format!("sampled lower norm bound {lo} is not positive")));
    }
    Ok(NormBounds { a_hat: lo, big_a_hat: hi })
}

/// `r(x) = Σ_r H_{x_r}` with `H_m = 1 + 1/2 + ... + 1/m`.
pub fn harmonic_remainder(x: &[u32]) -> f64 {
    x.iter().map(|&m| (1..=m).map(|k| 1.0 / k as f64).sum::<f64>()).sum()
}

/// Worst violations of `δ*(x) ≤ φ(x) ≤ δ*(x) + r(x)` over a balance table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichReport {
    /// `max_x (δ*(x) - φ(x))`.
    pub lower: f64,
    /// `max_x (φ(x) - δ*(x) - r(x))`.
    pub upper: f64,
    pub worst_lower_at: Vec<u32>,
    pub worst_upper_at: Vec<u32>,
    pub points: usize,
}

/// Checks `δ* ≤ φ ≤ δ* + r` at every point of the table's box.
pub fn sandwich_report(table: &BalanceTable) -> Result<SandwichReport> {
    let region = table.region();
    let lattice = table.lattice();
    let mut rep = SandwichReport {
        lower: f64::NEG_INFINITY,
        upper: f64::NEG_INFINITY,
        worst_lower_at: vec![],
        worst_upper_at: vec![],
        points: 0,
    };
    for (i, x) in lattice.points().enumerate() {
        let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let d = legendre(region, &xf)?;
        let phi = table.values()[i];
        let lower = d - phi;
        let upper = phi - d - harmonic_remainder(&x);
        if lower > rep.lower {
            rep.lower = lower;
            rep.worst_lower_at = x.clone();
        }
        if upper > rep.upper {
            rep.upper = upper;
            rep.worst_upper_at = x;
        }
        rep.points += 1;
    }
    Ok(rep)
}

/// `δ*(x + h) - δ*(x) - ⟨h, γ(x)⟩ - Σ_s h_s²/x_s`, which is never positive.
pub fn second_order_residual(region: &CapacityRegion, x: &[f64], h: &[f64]) -> Result<f64> {
    check_dim(region.num_classes(), x.len())?;
    check_dim(x.len(), h.len())?;
    if x.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument("base point must be strictly positive".into()));
    }
    let moved: Vec<f64> = x.iter().zip(h).map(|(a, b)| a + b).collect();
    if moved.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("x + h must be nonnegative".into()));
    }
    // Clamp rounding noise such as 1 + (-1) landing just below zero.
    let moved: Vec<f64> = moved.into_iter().map(|v| v.max(0.0)).collect();
    let gamma = pf_gradient(region, x)?;
    let linear: f64 = h.iter().zip(&gamma).map(|(a, g)| a * g).sum();
    let quad: f64 = h.iter().zip(x).map(|(a, b)| a * a / b).sum();
    Ok(legendre(region, &moved)? - legendre(region, x)? - linear - quad)
}

/// One row of the scaling comparison between `φ(nx)/n` and `δ*(x)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub n: u32,
    /// `g(n) = φ(nx)/n - δ*(x)`.
    pub gap: f64,
    /// `r(nx)/n`.
    pub bound: f64,
    pub within: bool,
    /// `‖λ^BF(nx) - λ^PF(x)‖∞`.
    pub rate_gap: f64,
}

/// Compares the balance function along the ray `{nx}` with the conjugate.
pub fn ld_convergence_report(region: &CapacityRegion, x: &[u32], n_list: &[u32]) -> Result<Vec<ScalingRow>> {
    check_dim(region.num_classes(), x.len())?;
    let top = n_list.iter().cloned().max().unwrap_or(1) as u64 * x.iter().cloned().max().unwrap_or(1) as u64;
    let bound = u32::try_from(top.max(1)).map_err(|_| Error::Budget { needed: top as u128, budget: TABLE_BUDGET })?;
    let table = BalanceTable::build(region, bound, TABLE_BUDGET)?;
    scaling_rows(&table, x, n_list)
}

/// As [`ld_convergence_report`] on an existing table.
pub fn scaling_rows(table: &BalanceTable, x: &[u32], n_list: &[u32]) -> Result<Vec<ScalingRow>> {
    let region = table.region();
    let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let d = legendre(region, &xf)?;
    let pf = pf_allocate(region, &xf)?.rates;
    n_list
        .iter()
        .map(|&n| {
            let nx: Vec<u32> = x.iter().map(|&v| v * n).collect();
            let gap = table.phi(&nx)? / n as f64 - d;
            let bound = harmonic_remainder(&nx) / n as f64;
            let bf = table.bf_rates(&nx)?;
            let rate_gap = bf.iter().zip(&pf).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            Ok(ScalingRow { n, gap, bound, within: gap >= -1e-9 && gap <= bound + 1e-9, rate_gap })
        })
        .collect()
}
