//! (w, α)-fair and proportionally fair allocations over polyhedral regions,
//! and the conjugate `δ_K*` built on top of them.
//!
//! The solver runs a log-barrier path-following phase on the primal to find
//! the set of saturated links, then polishes the link prices with Newton's
//! method on the reduced dual `A_S λ(p) = c_S`, where
//! `λ_r(p) = (k_r / (Aᵀp)_r)^{1/α}`. Prices built this way satisfy
//! stationarity exactly, so the certificate reduces to feasibility and
//! complementary slackness.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::capacity::{CapacityRegion, Face};
use crate::error::{check_dim, Error, Result};
use crate::linalg;

/// Tolerance every returned [`AllocationResult`] is certified against.
pub const KKT_TOL: f64 = 1e-9;

/// Total Newton iteration cap across both solver phases.
pub const MAX_ITERATIONS: usize = 100_000;

/// Logarithm of an allocated rate, with a distinguished value for classes
/// that hold no users (and therefore receive exactly zero).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LogRate {
    Empty,
    Finite(f64),
}

impl LogRate {
    pub fn exp(self) -> f64 {
        match self {
            LogRate::Empty => 0.0,
            LogRate::Finite(v) => v.exp(),
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            LogRate::Empty => None,
            LogRate::Finite(v) => Some(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    /// Allocated rate per class; exactly zero for empty classes.
    pub rates: Vec<f64>,
    pub log_rates: Vec<LogRate>,
    /// Dual multiplier per link of the original region.
    pub prices: Vec<f64>,
    pub kkt_residual: f64,
    /// `Σ w_r x_r log λ_r` when α = 1 (this is `δ_K*(x)` for plain
    /// proportional fairness), `Σ x_r U_r(λ_r / x_r)` otherwise.
    pub objective: f64,
}

impl AllocationResult {
    fn zero(region: &CapacityRegion) -> Self {
        let n = region.num_classes();
        AllocationResult {
            rates: vec![0.0; n],
            log_rates: vec![LogRate::Empty; n],
            prices: vec![0.0; region.num_links()],
            kkt_residual: 0.0,
            objective: 0.0,
        }
    }
}

/// Maximises `Σ_{x_r > 0} x_r U_r(λ_r / x_r)` over the region, with
/// `U_r(y) = w_r log y` for α = 1 and `w_r y^{1-α} / (1-α)` otherwise.
pub fn alpha_fair_allocate(region: &CapacityRegion, x: &[f64], w: &[f64], alpha: f64) -> Result<AllocationResult> {
    let n = region.num_classes();
    check_dim(n, x.len())?;
    check_dim(n, w.len())?;
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if x.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument("populations must be finite and nonnegative".into()));
    }
    if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidArgument("weights must be positive".into()));
    }
    let face = Face::of(x);
    if face.support.is_empty() {
        return Ok(AllocationResult::zero(region));
    }

    let links: Vec<usize> = (0..region.num_links())
        .filter(|&l| face.support.iter().any(|&r| region.incidence()[(l, r)] > 0.0))
        .collect();
    let a = linalg::block(region.incidence(), &links, &face.support);
    let c: Vec<f64> = links.iter().map(|&l| region.capacities()[l]).collect();
    let coef: Vec<f64> = face.support.iter().map(|&r| w[r] * x[r].powf(alpha)).collect();
    let scale = coef.iter().cloned().fold(0.0f64, f64::max);
    let k: Vec<f64> = coef.iter().map(|v| v / scale).collect();

    let problem = Reduced { a: &a, c: &c, k: &k, alpha };
    let (lam_s, p_s, iterations) = problem.solve()?;

    let mut rates = vec![0.0; n];
    let mut log_rates = vec![LogRate::Empty; n];
    for (j, &r) in face.support.iter().enumerate() {
        rates[r] = lam_s[j];
        log_rates[r] = LogRate::Finite(lam_s[j].ln());
    }
    let mut prices = vec![0.0; region.num_links()];
    for (i, &l) in links.iter().enumerate() {
        prices[l] = p_s[i] * scale;
    }

    let objective = face
        .support
        .iter()
        .map(|&r| {
            if alpha == 1.0 {
                w[r] * x[r] * rates[r].ln()
            } else {
                x[r] * w[r] * (rates[r] / x[r]).powf(1.0 - alpha) / (1.0 - alpha)
            }
        })
        .sum();

    let mut result = AllocationResult { rates, log_rates, prices, kkt_residual: 0.0, objective };
    result.kkt_residual = kkt_residual(region, x, w, alpha, &result);
    if !(result.kkt_residual <= KKT_TOL) {
        return Err(Error::SolverFailure { residual: result.kkt_residual, iterations });
    }
    Ok(result)
}

/// Proportionally fair allocation: `alpha_fair_allocate` with unit weights
/// and α = 1. Accepts real (fluid) populations.
pub fn pf_allocate(region: &CapacityRegion, x: &[f64]) -> Result<AllocationResult> {
    alpha_fair_allocate(region, x, &vec![1.0; x.len()], 1.0)
}

/// `δ_K*(x) = Σ_{x_r > 0} x_r log λ_r^{PF}(x)`, with `δ_K*(0) = 0`.
pub fn legendre(region: &CapacityRegion, x: &[f64]) -> Result<f64> {
    Ok(pf_allocate(region, x)?.objective)
}

/// `γ^{PF}(x)`, the gradient of `δ_K*` at a strictly positive `x`.
pub fn pf_gradient(region: &CapacityRegion, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(region.num_classes(), x.len())?;
    if x.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument(
            "gradient of the conjugate is only defined for strictly positive populations".into(),
        ));
    }
    let res = pf_allocate(region, x)?;
    Ok(res.log_rates.iter().map(|g| g.finite().expect("positive class")).collect())
}

/// Measured KKT residual of an allocation, in the caller's units.
pub fn kkt_residual(region: &CapacityRegion, x: &[f64], w: &[f64], alpha: f64, res: &AllocationResult) -> f64 {
    let a = region.incidence();
    let slack = region.slack(&res.rates).expect("dimension checked");
    // Prices carry the units of the coefficients w_r x_r^α; complementary
    // slackness is measured once those exceed one.
    let price_unit = (0..x.len())
        .filter(|&r| x[r] > 0.0)
        .map(|r| w[r] * x[r].powf(alpha))
        .fold(1.0f64, f64::max);
    let mut worst = 0.0f64;
    for (l, s) in slack.iter().enumerate() {
        worst = worst.max(-s);
        worst = worst.max(-res.prices[l]);
        worst = worst.max(res.prices[l] * s.abs() / price_unit);
    }
    for r in 0..region.num_classes() {
        if x[r] > 0.0 {
            let coef = w[r] * x[r].powf(alpha);
            let marginal = coef * res.rates[r].powf(-alpha);
            let price: f64 = (0..region.num_links()).map(|l| a[(l, r)] * res.prices[l]).sum();
            // For α ≠ 1 the marginal utility can dwarf the coefficient, so the
            // gap is also taken relative to the marginal itself.
            let unit = if alpha == 1.0 { coef.max(1.0) } else { coef.max(marginal).max(1.0) };
            worst = worst.max((marginal - price).abs() / unit);
        } else if res.rates[r] != 0.0 {
            worst = f64::INFINITY;
        }
    }
    if worst.is_nan() {
        f64::INFINITY
    } else {
        worst
    }
}

/// The problem restricted to the support of `x`, with normalised coefficients.
struct Reduced<'a> {
    a: &'a DMatrix<f64>,
    c: &'a [f64],
    k: &'a [f64],
    alpha: f64,
}

impl Reduced<'_> {
    fn links(&self) -> usize {
        self.a.nrows()
    }

    fn classes(&self) -> usize {
        self.a.ncols()
    }

    fn slack(&self, lam: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.links(), (0..self.links()).map(|l| self.c[l] - self.a.row(l).dot(&lam.transpose())))
    }

    fn utility(&self, lam: f64, k: f64) -> f64 {
        if self.alpha == 1.0 {
            k * lam.ln()
        } else {
            k * lam.powf(1.0 - self.alpha) / (1.0 - self.alpha)
        }
    }

    fn barrier_value(&self, lam: &DVector<f64>, mu: f64) -> f64 {
        let s = self.slack(lam);
        (0..self.classes()).map(|r| self.utility(lam[r], self.k[r])).sum::<f64>()
            + mu * s.iter().map(|v| v.ln()).sum::<f64>()
    }

    fn solve(&self) -> Result<(Vec<f64>, Vec<f64>, usize)> {
        let mut iterations = 0usize;
        let (lam, mu) = self.barrier(&mut iterations)?;
        let s = self.slack(&lam);
        let barrier_prices: Vec<f64> = s.iter().map(|v| mu / v).collect();

        // Saturated links at the end of the barrier phase seed the active set.
        let mut active: Vec<bool> = (0..self.links()).map(|l| s[l] <= 1e-4 * self.c[l]).collect();
        let mut warm = barrier_prices.clone();
        for _round in 0..4 * self.links() + 4 {
            self.cover_classes(&mut active, &s);
            let idx: Vec<usize> = (0..self.links()).filter(|&l| active[l]).collect();
            let init: Vec<f64> = idx.iter().map(|&l| warm[l].max(1e-12 * barrier_prices[l]).max(1e-300)).collect();
            let solved = self.polish_log(&idx, &init, &mut iterations).map(|p| (p, true));
            let Some((p_act, converged)) = solved.or_else(|| self.polish(&idx, &init, &mut iterations)) else {
                break;
            };
            for (i, &l) in idx.iter().enumerate() {
                if p_act[i] > 0.0 {
                    warm[l] = p_act[i];
                }
            }
            let mut p = vec![0.0; self.links()];
            for (i, &l) in idx.iter().enumerate() {
                p[l] = p_act[i].max(0.0);
            }
            let lam = self.rates_from_prices(&p);
            let slack = self.slack(&DVector::from_vec(lam.clone()));

            let negative = idx.iter().enumerate().filter(|(i, _)| p_act[*i] < -1e-13).min_by(|a, b| {
                p_act[a.0].partial_cmp(&p_act[b.0]).expect("finite prices")
            });
            let violated = (0..self.links())
                .filter(|&l| !active[l] && slack[l] < -1e-13 * self.c[l])
                .min_by(|&a, &b| (slack[a] / self.c[a]).partial_cmp(&(slack[b] / self.c[b])).expect("finite"));
            // An unconverged solve still hints at which link to drop or add.
            match (violated, negative) {
                (_, Some((_, &l))) if !converged => active[l] = false,
                (Some(l), _) => active[l] = true,
                (None, Some((_, &l))) => active[l] = false,
                (None, None) if converged => return Ok((lam, p, iterations)),
                // Nearly tight but redundant links make the reduced system
                // singular; drop the loosest one that no class depends on.
                (None, None) => match self.redundant_link(&active, &s) {
                    Some(l) => active[l] = false,
                    None => break,
                },
            }
            if iterations > MAX_ITERATIONS {
                break;
            }
        }
        // Fall back on the barrier point; the caller certifies it.
        Ok((lam.iter().cloned().collect(), barrier_prices, iterations))
    }

    /// Every class must touch an active link, otherwise its rate is unbounded
    /// in the reduced problem.
    fn cover_classes(&self, active: &mut [bool], s: &DVector<f64>) {
        for r in 0..self.classes() {
            if !(0..self.links()).any(|l| active[l] && self.a[(l, r)] > 0.0) {
                let tightest = (0..self.links())
                    .filter(|&l| self.a[(l, r)] > 0.0)
                    .min_by(|&a, &b| (s[a] / self.c[a]).partial_cmp(&(s[b] / self.c[b])).expect("finite"))
                    .expect("every class uses a link");
                active[tightest] = true;
            }
        }
    }

    /// Active link with the largest relative slack whose removal leaves every
    /// class on some other active link.
    fn redundant_link(&self, active: &[bool], s: &DVector<f64>) -> Option<usize> {
        (0..self.links())
            .filter(|&l| active[l])
            .filter(|&l| {
                (0..self.classes())
                    .filter(|&r| self.a[(l, r)] > 0.0)
                    .all(|r| (0..self.links()).any(|k| k != l && active[k] && self.a[(k, r)] > 0.0))
            })
            .max_by(|&a, &b| (s[a] / self.c[a]).partial_cmp(&(s[b] / self.c[b])).expect("finite"))
    }

    fn rates_from_prices(&self, p: &[f64]) -> Vec<f64> {
        (0..self.classes())
            .map(|r| {
                let q: f64 = (0..self.links()).map(|l| self.a[(l, r)] * p[l]).sum();
                (self.k[r] / q).powf(1.0 / self.alpha)
            })
            .collect()
    }

    /// Log-barrier path following; returns the last iterate and barrier weight.
    fn barrier(&self, iterations: &mut usize) -> Result<(DVector<f64>, f64)> {
        let (m, n) = (self.links(), self.classes());
        let mut lam = DVector::from_iterator(
            n,
            (0..n).map(|r| {
                (0..m)
                    .filter(|&l| self.a[(l, r)] > 0.0)
                    .map(|l| 0.5 * self.c[l] / self.a.row(l).sum())
                    .fold(f64::INFINITY, f64::min)
            }),
        );
        let mut mu = 1.0;
        while mu > 1e-10 {
            for _ in 0..200 {
                *iterations += 1;
                if *iterations > MAX_ITERATIONS {
                    return Err(Error::SolverFailure { residual: f64::NAN, iterations: *iterations });
                }
                let s = self.slack(&lam);
                let mut grad = DVector::zeros(n);
                let mut hess = DMatrix::zeros(n, n);
                for r in 0..n {
                    grad[r] = self.k[r] * lam[r].powf(-self.alpha);
                    hess[(r, r)] = self.alpha * self.k[r] * lam[r].powf(-self.alpha - 1.0);
                }
                for l in 0..m {
                    let inv = 1.0 / s[l];
                    for r in 0..n {
                        grad[r] -= mu * self.a[(l, r)] * inv;
                        for q in 0..n {
                            hess[(r, q)] += mu * self.a[(l, r)] * self.a[(l, q)] * inv * inv;
                        }
                    }
                }
                let step = match hess.clone().cholesky() {
                    Some(ch) => ch.solve(&grad),
                    None => match linalg::lstsq(&hess, &grad) {
                        Some(v) => v,
                        None => break,
                    },
                };
                let decrement = grad.dot(&step);
                if !(decrement > 1e-20) {
                    break;
                }
                // Stay strictly inside: positive rates and positive slack.
                let mut t_max = 1.0f64;
                for r in 0..n {
                    if step[r] < 0.0 {
                        t_max = t_max.min(-0.99 * lam[r] / step[r]);
                    }
                }
                for l in 0..m {
                    let ds: f64 = -(0..n).map(|r| self.a[(l, r)] * step[r]).sum::<f64>();
                    if ds < 0.0 {
                        t_max = t_max.min(-0.99 * s[l] / ds);
                    }
                }
                let f0 = self.barrier_value(&lam, mu);
                let mut t = t_max;
                let mut accepted = false;
                while t > 1e-14 {
                    let cand = &lam + &step * t;
                    let f1 = self.barrier_value(&cand, mu);
                    if f1.is_finite() && f1 >= f0 + 1e-4 * t * decrement {
                        lam = cand;
                        accepted = true;
                        break;
                    }
                    t *= 0.5;
                }
                if !accepted {
                    break;
                }
            }
            mu *= 0.2;
        }
        Ok((lam, mu / 0.2))
    }

    /// Newton on `log(A_S λ(e^y)) = log c_S` over log prices `y`.
    ///
    /// Prices stay positive and rates respond almost linearly to `y`, so this
    /// copes with prices spread over many orders of magnitude. Returns `None`
    /// when no positive solution is reached.
    fn polish_log(&self, idx: &[usize], init: &[f64], iterations: &mut usize) -> Option<Vec<f64>> {
        let n = self.classes();
        let a_s = DMatrix::from_fn(idx.len(), n, |i, r| self.a[(idx[i], r)]);
        let c_s = DVector::from_iterator(idx.len(), idx.iter().map(|&l| self.c[l]));
        let alpha = self.alpha;
        let eval = |y: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
            let p = y.map(f64::exp);
            let q = a_s.transpose() * &p;
            if q.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return None;
            }
            let lam = DVector::from_iterator(n, (0..n).map(|r| (self.k[r] / q[r]).powf(1.0 / alpha)));
            let load = &a_s * &lam;
            if load.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return None;
            }
            let f = DVector::from_iterator(idx.len(), (0..idx.len()).map(|i| (load[i] / c_s[i]).ln()));
            Some((p, q, lam, f))
        };
        let mut y = DVector::from_iterator(init.len(), init.iter().map(|v| v.ln()));
        let (mut p, mut q, mut lam, mut f) = eval(&y)?;
        for _ in 0..200 {
            *iterations += 1;
            let norm = linalg::max_abs(&f);
            if norm <= 1e-15 {
                return Some(p.iter().cloned().collect());
            }
            let d = DVector::from_iterator(n, (0..n).map(|r| lam[r] / (alpha * q[r])));
            let load = &a_s * &lam;
            let mut jac = &a_s * DMatrix::from_diagonal(&d) * a_s.transpose();
            for i in 0..idx.len() {
                for j in 0..idx.len() {
                    jac[(i, j)] *= p[j] / load[i];
                }
            }
            // jac is minus the Jacobian of f.
            let mut step = linalg::lstsq(&jac, &f)?;
            // Loads are flat in the price of a link whose classes get almost
            // nothing, so Newton asks for huge moves there. Such moves are
            // capped and accepted as long as the residual does not grow.
            let longest = linalg::max_abs(&step);
            let capped = longest > 20.0;
            if capped {
                step *= 20.0 / longest;
            }
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-6 {
                let cand = &y + &step * t;
                if let Some(next) = eval(&cand) {
                    let bound = if capped && t == 1.0 { norm } else { (1.0 - 1e-4 * t) * norm };
                    if linalg::max_abs(&next.3) < bound {
                        y = cand;
                        (p, q, lam, f) = next;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                return (norm <= 1e-13).then(|| p.iter().cloned().collect());
            }
        }
        (linalg::max_abs(&f) <= 1e-13).then(|| p.iter().cloned().collect())
    }

    /// Newton on the reduced dual: find active prices with `A_S λ(p) = c_S`.
    ///
    /// Steps are damped on the dual objective
    /// `D(p) = c_S·p + Σ_r [g_r(λ_r(q)) - q_r λ_r(q)]`, `q = A_Sᵀ p`, whose
    /// gradient is `c_S - A_S λ(p)`.
    fn polish(&self, idx: &[usize], init: &[f64], iterations: &mut usize) -> Option<(Vec<f64>, bool)> {
        let n = self.classes();
        let a_s = DMatrix::from_fn(idx.len(), n, |i, r| self.a[(idx[i], r)]);
        let c_s = DVector::from_iterator(idx.len(), idx.iter().map(|&l| self.c[l]));
        let alpha = self.alpha;
        let eval = |p: &DVector<f64>| -> Option<Point> {
            let q = a_s.transpose() * p;
            if q.iter().any(|&v| !(v > 0.0)) {
                return None;
            }
            let lam = DVector::from_iterator(n, (0..n).map(|r| (self.k[r] / q[r]).powf(1.0 / alpha)));
            let resid = &a_s * &lam - &c_s;
            let inner: f64 = (0..n)
                .map(|r| {
                    if alpha == 1.0 {
                        -self.k[r] * q[r].ln()
                    } else {
                        alpha / (1.0 - alpha) * q[r] * lam[r]
                    }
                })
                .sum();
            let dual = c_s.dot(p) + inner;
            Some(Point { p: p.clone(), q, lam, resid, dual })
        };
        let cmax = self.c.iter().cloned().fold(0.0f64, f64::max);
        let mut cur = eval(&DVector::from_vec(init.to_vec()))?;
        for _ in 0..200 {
            *iterations += 1;
            let norm = linalg::max_abs(&cur.resid);
            if norm <= 1e-15 * cmax {
                return Some((cur.p.iter().cloned().collect(), true));
            }
            let d = DVector::from_iterator(n, (0..n).map(|r| cur.lam[r] / (alpha * cur.q[r])));
            let hess = &a_s * DMatrix::from_diagonal(&d) * a_s.transpose();
            let mut step = linalg::lstsq(&hess, &cur.resid).unwrap_or_else(|| cur.resid.clone());
            if cur.resid.dot(&step) <= 0.0 {
                step = cur.resid.clone();
            }
            let slope = -cur.resid.dot(&step);
            let mut t = 1.0;
            let mut next = None;
            while t > 1e-12 {
                if let Some(cand) = eval(&(&cur.p + &step * t)) {
                    let armijo = cand.dual <= cur.dual + 1e-4 * t * slope;
                    if armijo || linalg::max_abs(&cand.resid) < 0.5 * norm {
                        next = Some(cand);
                        break;
                    }
                }
                t *= 0.5;
            }
            match next {
                Some(cand) => cur = cand,
                // Stalled at rounding level.
                None => return Some((cur.p.iter().cloned().collect(), norm <= 1e-12 * cmax)),
            }
        }
        let converged = linalg::max_abs(&cur.resid) <= 1e-12 * cmax;
        Some((cur.p.iter().cloned().collect(), converged))
    }
}

struct Point {
    p: DVector<f64>,
    q: DVector<f64>,
    lam: DVector<f64>,
    resid: DVector<f64>,
    dual: f64,
}
