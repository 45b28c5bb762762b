//! Fluid trajectories under proportional fairness: explicit Euler with
//! projection onto the orthant, faces handled by removing excursions
//! through empty classes.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::capacity::CapacityRegion;
use crate::dynamics::ScaledPath;
use crate::error::{check_dim, Error, Result};
use crate::format::FloatFormat;
use crate::linalg;
use crate::lyapunov::{norm_bounds_certificate, LyapunovContext};
use crate::pf_solver::pf_allocate;
use crate::traffic::{remove_excursions, TrafficModel};

/// Coordinates at or below this level count as empty.
pub const EPS_FACE: f64 = 1e-9;
/// Extra substeps allowed per grid step beyond one per class.
pub const MAX_SUBSTEPS: usize = 20;

/// Right-hand side of the fluid dynamics at one state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FluidDrift {
    /// `ẋ`, zero on the face.
    pub xdot: Vec<f64>,
    /// Classes held at zero, in increasing order.
    pub face: Vec<usize>,
    /// `⟨u, ν̃ - (I - P̃ᵀ)(ν e^u)⟩` over the classes off the face.
    pub h_bound: f64,
    /// Service rates `Ḋ_r` applied at this state.
    pub service: Vec<f64>,
    /// `L(x)` at this state.
    pub lyapunov: f64,
}

impl FluidDrift {
    pub fn face_mask(&self) -> u64 {
        self.face.iter().fold(0u64, |m, &r| m | (1u64 << r))
    }
}

fn check_inputs(region: &CapacityRegion, model: &TrafficModel, x: &[f64]) -> Result<()> {
    check_dim(region.num_classes(), model.num_classes())?;
    check_dim(region.num_classes(), x.len())?;
    if x.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument("fluid state must be finite and nonnegative".into()));
    }
    if region.num_classes() > 64 {
        return Err(Error::InvalidArgument("face bitmask supports at most 64 classes".into()));
    }
    Ok(())
}

/// Rates `σ_J` that hold the classes of `held` at zero when the others
/// are served at `mu_lambda = μ λ`: `μ_J σ_J = (I - Pᵀ_JJ)⁻¹(ν̄_J + Pᵀ_{J,·} μλ)`.
fn holding_rates(model: &TrafficModel, held: &[usize], mu_lambda: &[f64]) -> Result<Vec<f64>> {
    let n = model.num_classes();
    let others: Vec<usize> = (0..n).filter(|r| !held.contains(r)).collect();
    let pt = model.routing().transpose();
    let inner = DMatrix::identity(held.len(), held.len()) - linalg::block(&pt, held, held);
    let ml = DVector::from_iterator(others.len(), others.iter().map(|&s| mu_lambda[s]));
    let nb = DVector::from_iterator(held.len(), held.iter().map(|&r| model.nu_bar()[r]));
    let rhs = nb + linalg::block(&pt, held, &others) * ml;
    let flow = linalg::solve(&inner, &rhs)?;
    Ok(held.iter().enumerate().map(|(k, &r)| flow[k].max(0.0) / model.mu()[r]).collect())
}

/// Drift of the fluid model at `x`.
///
/// Classes with `x_r ≤ EPS_FACE` are candidates for the face. A candidate
/// set stays at zero only if the capacity left over by the PF allocation of
/// the other classes can absorb its through-flow; otherwise the class on
/// the most overloaded link carrying the most flow is released and the test
/// repeated. Released classes receive no service and fill up.
pub fn fluid_drift(region: &CapacityRegion, model: &TrafficModel, x: &[f64]) -> Result<FluidDrift> {
    check_inputs(region, model, x)?;
    let n = x.len();
    let xs: Vec<f64> = x.iter().map(|&v| if v <= EPS_FACE { 0.0 } else { v }).collect();
    let alloc = pf_allocate(region, &xs)?;
    let lambda = alloc.rates.clone();
    let mu_lambda: Vec<f64> = (0..n).map(|r| model.mu()[r] * lambda[r]).collect();

    let mut face: Vec<usize> = (0..n).filter(|&r| xs[r] == 0.0).collect();
    let mut sigma = Vec::new();
    while !face.is_empty() {
        sigma = holding_rates(model, &face, &mu_lambda)?;
        let mut total = lambda.clone();
        for (k, &r) in face.iter().enumerate() {
            total[r] = sigma[k];
        }
        let slack = region.slack(&total)?;
        let (worst, &min_slack) = slack
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("region has links");
        if min_slack >= -1e-9 * region.capacities()[worst].max(1.0) {
            break;
        }
        let a = region.incidence();
        let drop = face
            .iter()
            .enumerate()
            .filter(|(_, &r)| a[(worst, r)] > 0.0)
            .max_by(|p, q| (a[(worst, *p.1)] * sigma[p.0]).total_cmp(&(a[(worst, *q.1)] * sigma[q.0])))
            .map(|(k, _)| k);
        // An overload without held classes is rounding in the PF allocation.
        let Some(drop) = drop else { break };
        face.remove(drop);
        sigma.clear();
    }

    let mut service = lambda.clone();
    for (k, &r) in face.iter().enumerate() {
        service[r] = sigma[k];
    }
    let mut xdot = vec![0.0; n];
    let mut h_bound = 0.0;
    if face.len() < n {
        let exc = remove_excursions(model, &face)?;
        let kept = &exc.kept;
        let ml = DVector::from_iterator(kept.len(), kept.iter().map(|&r| mu_lambda[r]));
        let d = &exc.nu_tilde + exc.p_tilde.transpose() * &ml - &ml;
        let rho = model.rho();
        for (k, &r) in kept.iter().enumerate() {
            xdot[r] = d[k];
            if lambda[r] > 0.0 && rho[r] > 0.0 {
                h_bound += (lambda[r] / rho[r]).ln() * d[k];
            }
        }
    }

    let mut lin = 0.0;
    for r in 0..n {
        if xs[r] > 0.0 {
            let rho = model.rho()[r];
            lin += if rho > 0.0 { xs[r] * rho.ln() } else { f64::NEG_INFINITY };
        }
    }
    Ok(FluidDrift { xdot, face, h_bound, service, lyapunov: alloc.objective - lin })
}

/// A fluid trajectory on a uniform grid.
#[derive(Debug, Clone, Serialize)]
pub struct FluidTrajectory {
    pub h_step: f64,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub drifts: Vec<FluidDrift>,
    /// Cumulative service `D_r(t_k)`.
    pub service: Vec<Vec<f64>>,
    /// `max_r (ν̄_r + μ_r · max feasible rate)`, the scale of `|ẋ|`.
    pub rate_scale: f64,
    pub x0: Vec<f64>,
    pub nu_bar: Vec<f64>,
    pub mu: Vec<f64>,
    pub routing: Vec<Vec<f64>>,
}

impl FluidTrajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory has a start point")
    }

    pub fn lyapunov(&self) -> Vec<f64> {
        self.drifts.iter().map(|d| d.lyapunov).collect()
    }

    /// `max_{k,r} |x_r(t_k) - x_r(0) - ν̄_r t_k + μ_r D_r - Σ_s p_sr μ_s D_s|`.
    pub fn bookkeeping_residual(&self) -> f64 {
        let n = self.x0.len();
        let mut worst: f64 = 0.0;
        for (k, x) in self.states.iter().enumerate() {
            let t = self.times[k];
            let d = &self.service[k];
            for r in 0..n {
                let routed: f64 = (0..n).map(|s| self.routing[s][r] * self.mu[s] * d[s]).sum();
                let pred = self.x0[r] + self.nu_bar[r] * t - self.mu[r] * d[r] + routed;
                worst = worst.max((x[r] - pred).abs());
            }
        }
        worst
    }

    /// State at time `t` by linear interpolation on the grid.
    pub fn at(&self, t: f64) -> Vec<f64> {
        let last = self.times.len() - 1;
        if t <= 0.0 {
            return self.states[0].clone();
        }
        let pos = t / self.h_step;
        let k = (pos.floor() as usize).min(last);
        if k >= last {
            return self.states[last].clone();
        }
        let w = (pos - k as f64).clamp(0.0, 1.0);
        self.states[k].iter().zip(&self.states[k + 1]).map(|(a, b)| a + w * (b - a)).collect()
    }

    /// CSV with columns `t, x_1..x_R, L, h_bound, face`.
    pub fn write_csv<W: Write>(&self, out: W, fmt: FloatFormat) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.x0.len();
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|r| format!("x_{r}")));
        header.extend(["L".to_string(), "h_bound".to_string(), "face".to_string()]);
        w.write_record(&header)?;
        for (k, x) in self.states.iter().enumerate() {
            let d = &self.drifts[k];
            let mut rec = vec![fmt.fmt(self.times[k])];
            rec.extend(x.iter().map(|&v| fmt.fmt(v)));
            rec.push(fmt.fmt(d.lyapunov));
            rec.push(fmt.fmt(d.h_bound));
            rec.push(d.face_mask().to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn rate_scale(region: &CapacityRegion, model: &TrafficModel) -> f64 {
    (0..region.num_classes())
        .map(|r| model.nu_bar()[r] + model.mu()[r] * region.max_class_rate(r))
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE)
}

/// Advances `x` by one grid step of length `h`, splitting the step where a
/// coordinate reaches zero so the projection never cuts a step short.
fn advance(
    region: &CapacityRegion,
    model: &TrafficModel,
    x: &mut [f64],
    d: &mut [f64],
    first: &FluidDrift,
    h: f64,
    t: f64,
) -> Result<()> {
    let n = x.len();
    let mut remaining = h;
    let mut drift = first.clone();
    let mut substeps = 0usize;
    while remaining > 0.0 {
        let mut tau = remaining;
        let mut hits = Vec::new();
        for r in 0..n {
            if drift.xdot[r] < 0.0 && x[r] > 0.0 {
                let hit = x[r] / -drift.xdot[r];
                if hit < tau {
                    tau = hit;
                    hits.clear();
                }
                if hit <= tau {
                    hits.push(r);
                }
            }
        }
        for r in 0..n {
            x[r] = (x[r] + tau * drift.xdot[r]).max(0.0);
            d[r] += tau * drift.service[r];
        }
        for &r in &hits {
            x[r] = 0.0;
        }
        remaining -= tau;
        if remaining <= 1e-15 * h {
            break;
        }
        substeps += 1;
        if substeps > n + MAX_SUBSTEPS {
            return Err(Error::StepSize {
                time: t,
                reason: format!("more than {} face changes within one step of {h}", n + MAX_SUBSTEPS),
            });
        }
        drift = fluid_drift(region, model, x)?;
    }
    Ok(())
}

fn run(
    region: &CapacityRegion,
    model: &TrafficModel,
    x0: &[f64],
    h_step: f64,
    max_steps: usize,
    mut stop: impl FnMut(&FluidDrift) -> bool,
) -> Result<FluidTrajectory> {
    check_inputs(region, model, x0)?;
    if !(h_step.is_finite() && h_step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h_step}")));
    }
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut d = vec![0.0; n];
    let mut traj = FluidTrajectory {
        h_step,
        times: Vec::new(),
        states: Vec::new(),
        drifts: Vec::new(),
        service: Vec::new(),
        rate_scale: rate_scale(region, model),
        x0: x0.to_vec(),
        nu_bar: model.nu_bar().to_vec(),
        mu: model.mu().to_vec(),
        routing: (0..n).map(|r| (0..n).map(|s| model.routing()[(r, s)]).collect()).collect(),
    };
    for k in 0..=max_steps {
        let t = k as f64 * h_step;
        let drift = fluid_drift(region, model, &x)?;
        let done = k == max_steps || stop(&drift);
        traj.times.push(t);
        traj.states.push(x.clone());
        traj.service.push(d.clone());
        traj.drifts.push(drift.clone());
        if done {
            break;
        }
        advance(region, model, &mut x, &mut d, &drift, h_step, t)?;
    }
    Ok(traj)
}

/// Integrates on `[0, T]` with grid step `h_step`.
pub fn integrate(region: &CapacityRegion, model: &TrafficModel, x0: &[f64], t_end: f64, h_step: f64) -> Result<FluidTrajectory> {
    if !(t_end.is_finite() && t_end >= 0.0) {
        return Err(Error::InvalidArgument(format!("horizon must be nonnegative, got {t_end}")));
    }
    let steps = (t_end / h_step).round() as usize;
    run(region, model, x0, h_step, steps, |_| false)
}

/// Integrates until `L(x) ≤ fraction · L(x0)` or `t_max`, whichever comes first.
pub fn integrate_until_level(
    region: &CapacityRegion,
    model: &TrafficModel,
    x0: &[f64],
    h_step: f64,
    fraction: f64,
    t_max: f64,
) -> Result<FluidTrajectory> {
    let mut target = None;
    let steps = (t_max / h_step).ceil() as usize;
    run(region, model, x0, h_step, steps, |d| {
        let level = *target.get_or_insert(fraction * d.lyapunov);
        d.lyapunov <= level
    })
}

/// Lyapunov descent along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DescentReport {
    pub monotone: bool,
    /// Largest single-step increase of `L`.
    pub max_increase: f64,
    pub tolerance: f64,
    /// First grid time with `L ≤ L(x0)/2`, if reached.
    pub t_half: Option<f64>,
    /// Largest `h_bound` over grid states with `x ≠ 0`.
    pub max_h_bound: f64,
}

/// Checks that `L` is nonincreasing within `10 · h · rate scale · Â`.
pub fn descent_report(traj: &FluidTrajectory, ctx: &LyapunovContext) -> Result<DescentReport> {
    if !ctx.is_stable() {
        return Err(Error::InvalidArgument("descent needs loads in the interior of the region".into()));
    }
    let a_hat = if traj.x0.iter().all(|&v| v == 0.0) {
        0.0
    } else {
        norm_bounds_certificate(ctx, 256, 0)?.big_a_hat
    };
    let tolerance = 10.0 * traj.h_step * traj.rate_scale * a_hat;
    let l = traj.lyapunov();
    let max_increase = l.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max).max(0.0);
    let half = l[0] / 2.0;
    let t_half = l.iter().position(|&v| v <= half).map(|k| traj.times[k]);
    let max_h_bound = traj
        .states
        .iter()
        .zip(&traj.drifts)
        .filter(|(x, _)| x.iter().any(|&v| v > 0.0))
        .map(|(_, d)| d.h_bound)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(DescentReport { monotone: max_increase <= tolerance, max_increase, tolerance, t_half, max_h_bound })
}

/// `sup_k ‖path(t_k) - x(t_k)‖∞` with the fluid trajectory interpolated.
pub fn path_distance(path: &ScaledPath, traj: &FluidTrajectory) -> f64 {
    path.times
        .iter()
        .zip(&path.states)
        .map(|(&t, y)| traj.at(t).iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn mm1() -> (CapacityRegion, TrafficModel) {
        (CapacityRegion::single_link(1, 1.0).unwrap(), TrafficModel::without_routing(vec![0.5], vec![1.0]).unwrap())
    }

    #[test]
    fn single_class_drift_and_line() {
        let (region, model) = mm1();
        let d = fluid_drift(&region, &model, &[1.0]).unwrap();
        assert!((d.xdot[0] + 0.5).abs() < 1e-12);
        assert!(d.face.is_empty());
        assert!(d.h_bound < 0.0);
        let traj = integrate(&region, &model, &[1.0], 3.0, 1e-3).unwrap();
        for (t, x) in traj.times.iter().zip(&traj.states) {
            let exact = (1.0 - 0.5 * t).max(0.0);
            assert!((x[0] - exact).abs() <= 1e-2, "t = {t}");
        }
        assert!(traj.bookkeeping_residual() < 1e-9);
    }

    #[test]
    fn origin_is_absorbing_for_interior_loads() {
        let region = CapacityRegion::two_link_three_class();
        let model = TrafficModel::without_routing(vec![0.4, 0.4, 0.4], vec![1.0; 3]).unwrap();
        let d = fluid_drift(&region, &model, &[0.0; 3]).unwrap();
        assert_eq!(d.xdot, vec![0.0; 3]);
        assert_eq!(d.face, vec![0, 1, 2]);
        let traj = integrate(&region, &model, &[0.0; 3], 1.0, 1e-2).unwrap();
        assert!(traj.states.iter().all(|x| x.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn no_arrivals_means_decreasing() {
        let region = CapacityRegion::two_link_three_class();
        let model = TrafficModel::without_routing(vec![0.0; 3], vec![1.0, 2.0, 0.5]).unwrap();
        let traj = integrate(&region, &model, &[1.0, 0.5, 2.0], 2.0, 1e-3).unwrap();
        for w in traj.states.windows(2) {
            for r in 0..3 {
                assert!(w[1][r] < w[0][r] || w[0][r] == 0.0);
            }
        }
    }

    #[test]
    fn descent_on_single_class() {
        let (region, model) = mm1();
        let traj = integrate(&region, &model, &[1.0], 3.0, 1e-3).unwrap();
        let ctx = LyapunovContext::new(region, model.rho().to_vec()).unwrap();
        let rep = descent_report(&traj, &ctx).unwrap();
        assert!(rep.monotone);
        assert!((rep.t_half.unwrap() - 1.0).abs() < 1e-2);
        for (t, l) in traj.times.iter().zip(traj.lyapunov()) {
            let exact = (1.0 - 0.5 * t).max(0.0) * 2f64.ln();
            assert!((l - exact).abs() < 1e-2);
        }
    }

    #[test]
    fn routed_face_keeps_bookkeeping() {
        // Class 0 feeds class 1; class 1 is empty but served on its own link.
        let region = CapacityRegion::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0, 1.0]).unwrap();
        let p = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let model = TrafficModel::new(vec![0.3, 0.0], vec![1.0, 1.0], p).unwrap();
        let d = fluid_drift(&region, &model, &[1.0, 0.0]).unwrap();
        assert_eq!(d.face, vec![1]);
        assert!((d.xdot[0] + 0.7).abs() < 1e-12);
        assert!((d.service[1] - 1.0).abs() < 1e-12);
        let traj = integrate(&region, &model, &[1.0, 0.0], 2.0, 1e-3).unwrap();
        assert!(traj.bookkeeping_residual() < 1e-9);
        assert!(traj.final_state().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn euler_is_first_order() {
        let region = CapacityRegion::two_link_three_class();
        let model = TrafficModel::without_routing(vec![0.2, 0.3, 0.1], vec![1.0; 3]).unwrap();
        let x0 = [1.0, 0.5, 0.8];
        let at = |h: f64| integrate(&region, &model, &x0, 0.5, h).unwrap().final_state().to_vec();
        let reference = at(1.25e-4);
        let err = |h: f64| at(h).iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let ratio = err(4e-3) / err(2e-3);
        assert!((1.6..2.6).contains(&ratio), "ratio {ratio}");
    }
}
