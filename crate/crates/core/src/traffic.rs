//! Markovian routing between classes, excursion removal and phase-type
//! service expansion.

use nalgebra::{DMatrix, DVector};

use crate::capacity::CapacityRegion;
use crate::error::{check_dim, Error, Result};
use crate::linalg;

/// Margin below 1 that a routing matrix's spectral radius must clear.
pub const SPEC_TOL: f64 = 1e-9;

const ROW_SUM_TOL: f64 = 1e-12;
const POWER_TOL: f64 = 1e-12;
const POWER_MAX_ITER: usize = 20_000;

/// Outcome of [`check_spectral_radius`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCertificate {
    /// Point estimate of the Perron root.
    pub radius: f64,
    /// Collatz-Wielandt lower and upper bounds on the Perron root.
    pub lower: f64,
    pub upper: f64,
    /// `radius < 1 - SPEC_TOL` is certified.
    pub certified: bool,
}

/// Validates a routing matrix: square, nonnegative, row sums at most one.
pub fn validate_routing(p: &DMatrix<f64>) -> Result<()> {
    if p.nrows() != p.ncols() {
        return Err(Error::InvalidModel(format!("routing matrix is {}x{}, not square", p.nrows(), p.ncols())));
    }
    for i in 0..p.nrows() {
        let mut sum = 0.0;
        for j in 0..p.ncols() {
            let v = p[(i, j)];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidModel(format!("routing matrix row {i}: entry {j} is {v}, must be >= 0")));
            }
            sum += v;
        }
        if sum > 1.0 + ROW_SUM_TOL {
            return Err(Error::InvalidModel(format!("routing matrix row {i} sums to {sum} > 1")));
        }
    }
    Ok(())
}

/// Estimates the Perron root of a substochastic `P` and certifies it lies
/// below `1 - SPEC_TOL`.
///
/// Power iteration runs on `P + I`, whose Perron root is the only eigenvalue
/// of maximal modulus, and reports Collatz-Wielandt bounds. When those do not
/// close (reducible or defective matrices), certification falls back on the
/// M-matrix test: `I - P/(1 - SPEC_TOL)` has a nonnegative inverse exactly
/// when the radius is below `1 - SPEC_TOL`.
pub fn check_spectral_radius(p: &DMatrix<f64>) -> Result<SpectralCertificate> {
    validate_routing(p)?;
    let n = p.nrows();
    if n == 0 {
        return Ok(SpectralCertificate { radius: 0.0, lower: 0.0, upper: 0.0, certified: true });
    }
    let shifted = p + DMatrix::identity(n, n);
    let mut v = DVector::from_element(n, 1.0);
    let (mut lower, mut upper) = (0.0f64, f64::INFINITY);
    for _ in 0..POWER_MAX_ITER {
        let w = &shifted * &v;
        // (P + I)v >= v > 0, so every ratio is defined.
        let ratios = w.component_div(&v);
        lower = ratios.min();
        upper = ratios.max();
        let norm = w.max();
        v = w / norm;
        if upper - lower <= POWER_TOL {
            break;
        }
    }
    let (lower, upper) = ((lower - 1.0).max(0.0), (upper - 1.0).max(0.0));
    let radius = 0.5 * (lower + upper);
    let limit = 1.0 - SPEC_TOL;
    let certified = if upper < limit {
        true
    } else if lower >= limit {
        false
    } else {
        m_matrix_certificate(p, limit)
    };
    Ok(SpectralCertificate { radius, lower, upper, certified })
}

fn m_matrix_certificate(p: &DMatrix<f64>, limit: f64) -> bool {
    let n = p.nrows();
    let m = DMatrix::identity(n, n) - p / limit;
    match m.try_inverse() {
        Some(inv) => inv.iter().all(|v| v.is_finite() && *v >= -1e-12),
        None => false,
    }
}

/// Errors unless the spectral radius of `p` is certified below `1 - SPEC_TOL`.
pub fn require_subcritical(p: &DMatrix<f64>) -> Result<SpectralCertificate> {
    let cert = check_spectral_radius(p)?;
    if !cert.certified {
        return Err(Error::SpectralRadius { radius: cert.radius, margin: SPEC_TOL });
    }
    Ok(cert)
}

/// As [`require_subcritical`], skipping the iteration when the largest row
/// sum already bounds the radius below the limit.
fn ensure_subcritical(p: &DMatrix<f64>) -> Result<()> {
    validate_routing(p)?;
    let max_row = p.row_iter().map(|r| r.sum()).fold(0.0, f64::max);
    if max_row < 1.0 - SPEC_TOL {
        return Ok(());
    }
    require_subcritical(p).map(|_| ())
}

/// Effective arrival rates: solves `(I - Pᵀ)ν = ν̄`.
pub fn solve_traffic(nu_bar: &[f64], p: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_dim(p.nrows(), nu_bar.len())?;
    ensure_subcritical(p)?;
    let n = nu_bar.len();
    let m = DMatrix::identity(n, n) - p.transpose();
    let nu = linalg::solve(&m, &DVector::from_column_slice(nu_bar))?;
    // ν is a nonnegative combination of ν̄; clip rounding noise.
    Ok(nu.iter().zip(nu_bar).map(|(&v, &b)| v.max(b)).collect())
}

/// External rates, service rates and routing of a class population network.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficModel {
    nu_bar: Vec<f64>,
    mu: Vec<f64>,
    p: DMatrix<f64>,
    nu: Vec<f64>,
    rho: Vec<f64>,
    radius: f64,
}

impl TrafficModel {
    pub fn new(nu_bar: Vec<f64>, mu: Vec<f64>, p: DMatrix<f64>) -> Result<Self> {
        let n = nu_bar.len();
        if n == 0 {
            return Err(Error::InvalidModel("no classes".into()));
        }
        check_dim(n, mu.len())?;
        if p.nrows() != n || p.ncols() != n {
            return Err(Error::InvalidModel(format!("routing matrix must be {n}x{n}")));
        }
        for (r, &v) in nu_bar.iter().enumerate() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidModel(format!("nu_bar[{r}] = {v} must be finite and >= 0")));
            }
        }
        for (r, &v) in mu.iter().enumerate() {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidModel(format!("mu[{r}] = {v} must be finite and > 0")));
            }
        }
        let cert = require_subcritical(&p)?;
        let nu = solve_traffic(&nu_bar, &p)?;
        let rho = nu.iter().zip(&mu).map(|(v, m)| v / m).collect();
        Ok(TrafficModel { nu_bar, mu, p, nu, rho, radius: cert.radius })
    }

    /// No routing between classes.
    pub fn without_routing(nu_bar: Vec<f64>, mu: Vec<f64>) -> Result<Self> {
        let n = nu_bar.len();
        Self::new(nu_bar, mu, DMatrix::zeros(n, n))
    }

    pub fn num_classes(&self) -> usize {
        self.nu_bar.len()
    }

    pub fn nu_bar(&self) -> &[f64] {
        &self.nu_bar
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn routing(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn spectral_radius(&self) -> f64 {
        self.radius
    }

    pub fn has_routing(&self) -> bool {
        self.p.iter().any(|&v| v != 0.0)
    }

    /// Probability that a class `r` completion leaves the network.
    pub fn exit_probability(&self, r: usize) -> f64 {
        (1.0 - self.p.row(r).sum()).max(0.0)
    }

    /// Residual `max |(I - Pᵀ)ν - ν̄|` relative to `max(1, |ν̄|∞)`.
    pub fn traffic_residual(&self) -> f64 {
        let n = self.num_classes();
        let nu = DVector::from_column_slice(&self.nu);
        let r = (DMatrix::identity(n, n) - self.p.transpose()) * nu - DVector::from_column_slice(&self.nu_bar);
        let scale = self.nu_bar.iter().cloned().fold(1.0f64, f64::max);
        linalg::max_abs(&r) / scale
    }
}

/// The routing chain seen by the classes outside a removed set.
#[derive(Debug, Clone, PartialEq)]
pub struct Excursions {
    /// Surviving classes `Ī`, in increasing order.
    pub kept: Vec<usize>,
    /// Modified external rates `ν̃` over `Ī`.
    pub nu_tilde: DVector<f64>,
    /// Modified routing `P̃` over `Ī`.
    pub p_tilde: DMatrix<f64>,
}

impl Excursions {
    /// `max |ν_Ī - (I - P̃ᵀ)⁻¹ν̃|`, which vanishes when excursions through
    /// the removed classes are accounted for correctly.
    pub fn identity_residual(&self, nu: &[f64]) -> Result<f64> {
        let k = self.kept.len();
        let m = DMatrix::identity(k, k) - self.p_tilde.transpose();
        let lhs = linalg::solve(&m, &self.nu_tilde)?;
        let target = DVector::from_iterator(k, self.kept.iter().map(|&r| nu[r]));
        Ok(linalg::max_abs(&(lhs - target)))
    }
}

/// Removes the classes in `removed` from the routing chain: a job entering
/// a removed class is followed until it re-enters a kept class or leaves.
///
/// `ν̃ = ν̄_Ī + (Pᵀ)_{ĪI}(I - (Pᵀ)_{II})⁻¹ν̄_I` and
/// `P̃ᵀ = (Pᵀ)_{ĪĪ} + (Pᵀ)_{ĪI}(I - (Pᵀ)_{II})⁻¹(Pᵀ)_{IĪ}`.
pub fn remove_excursions(model: &TrafficModel, removed: &[usize]) -> Result<Excursions> {
    let n = model.num_classes();
    let mut is_removed = vec![false; n];
    for &r in removed {
        if r >= n {
            return Err(Error::InvalidArgument(format!("class {r} out of range")));
        }
        is_removed[r] = true;
    }
    let gone: Vec<usize> = (0..n).filter(|&r| is_removed[r]).collect();
    let kept: Vec<usize> = (0..n).filter(|&r| !is_removed[r]).collect();
    if kept.is_empty() {
        return Err(Error::InvalidArgument("cannot remove every class".into()));
    }
    let pt = model.routing().transpose();
    let nu_bar = DVector::from_column_slice(model.nu_bar());
    let nu_k = linalg::subvec(&nu_bar, &kept);
    let pt_kk = linalg::block(&pt, &kept, &kept);
    if gone.is_empty() {
        return Ok(Excursions { kept, nu_tilde: nu_k, p_tilde: pt_kk.transpose() });
    }
    let pt_kg = linalg::block(&pt, &kept, &gone);
    let pt_gk = linalg::block(&pt, &gone, &kept);
    let pt_gg = linalg::block(&pt, &gone, &gone);
    let inner = DMatrix::identity(gone.len(), gone.len()) - pt_gg;
    let through_nu = linalg::solve(&inner, &linalg::subvec(&nu_bar, &gone))?;
    let through_p = linalg::solve_mat(&inner, &pt_gk)?;
    let nu_tilde = nu_k + &pt_kg * through_nu;
    let p_tilde_t = pt_kk + &pt_kg * through_p;
    Ok(Excursions { kept, nu_tilde, p_tilde: p_tilde_t.transpose() })
}

/// `F_r(u) = Σ_s [(I - P̃)⁻¹]_{rs} g(u_s) (u_s - (P̃u)_s)` with `g(u) = e^u - 1`.
pub fn drift_functional(p_tilde: &DMatrix<f64>, u: &[f64], r: usize) -> Result<f64> {
    Ok(drift_functional_all(p_tilde, u, |v| v.exp_m1())?[r])
}

/// All coordinates of the drift functional for a general increasing `g`
/// vanishing at zero.
pub fn drift_functional_all(p_tilde: &DMatrix<f64>, u: &[f64], g: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    check_dim(p_tilde.nrows(), u.len())?;
    ensure_subcritical(p_tilde)?;
    let n = u.len();
    let uv = DVector::from_column_slice(u);
    let pu = p_tilde * &uv;
    let w = DVector::from_iterator(n, (0..n).map(|s| g(u[s]) * (u[s] - pu[s])));
    let y = linalg::solve(&(DMatrix::identity(n, n) - p_tilde), &w)?;
    Ok(y.iter().cloned().collect())
}

/// `[(I - P)⁻¹]_{rs}`, the expected number of visits to `s` starting from `r`.
pub fn visit_matrix(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_subcritical(p)?;
    let n = p.nrows();
    linalg::solve_mat(&(DMatrix::identity(n, n) - p), &DMatrix::identity(n, n))
}

/// Phase-type service law of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseType {
    /// Initial phase distribution.
    pub alpha: Vec<f64>,
    /// Exponential rate of each phase.
    pub rates: Vec<f64>,
    /// Phase-to-phase routing.
    pub routing: DMatrix<f64>,
}

impl PhaseType {
    pub fn new(alpha: Vec<f64>, rates: Vec<f64>, routing: DMatrix<f64>) -> Result<Self> {
        let k = alpha.len();
        if k == 0 {
            return Err(Error::InvalidModel("phase-type law with no phases".into()));
        }
        check_dim(k, rates.len())?;
        if routing.nrows() != k || routing.ncols() != k {
            return Err(Error::InvalidModel(format!("phase routing must be {k}x{k}")));
        }
        if alpha.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidModel("initial phase probabilities must be >= 0".into()));
        }
        let total: f64 = alpha.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidModel(format!("initial phase probabilities sum to {total}, not 1")));
        }
        if rates.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidModel("phase rates must be > 0".into()));
        }
        require_subcritical(&routing)?;
        Ok(PhaseType { alpha, rates, routing })
    }

    pub fn exponential(rate: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![rate], DMatrix::zeros(1, 1))
    }

    /// `k` sequential phases of the same rate.
    pub fn erlang(k: usize, rate: f64) -> Result<Self> {
        let mut alpha = vec![0.0; k];
        if k > 0 {
            alpha[0] = 1.0;
        }
        let routing = DMatrix::from_fn(k, k, |i, j| if j == i + 1 { 1.0 } else { 0.0 });
        Self::new(alpha, vec![rate; k], routing)
    }

    /// Mixture of exponentials.
    pub fn hyperexponential(probs: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        let k = probs.len();
        Self::new(probs, rates, DMatrix::zeros(k, k))
    }

    pub fn num_phases(&self) -> usize {
        self.alpha.len()
    }

    /// Mean service time `αᵀ(I - P)⁻¹(1/μ_i)`.
    pub fn mean(&self) -> Result<f64> {
        Ok(self.expected_visits()?.iter().zip(&self.rates).map(|(v, m)| v / m).sum())
    }

    /// Expected visits to each phase, `αᵀ(I - P)⁻¹`.
    pub fn expected_visits(&self) -> Result<Vec<f64>> {
        let k = self.num_phases();
        let m = DMatrix::identity(k, k) - self.routing.transpose();
        let v = linalg::solve(&m, &DVector::from_column_slice(&self.alpha))?;
        Ok(v.iter().cloned().collect())
    }
}

/// A network whose classes are (class, phase) pairs.
#[derive(Debug, Clone)]
pub struct PhaseExpansion {
    pub region: CapacityRegion,
    pub model: TrafficModel,
    /// `(class, phase)` of every expanded class, grouped by class.
    pub labels: Vec<(usize, usize)>,
    /// Mean service time of each original class.
    pub mean_service: Vec<f64>,
}

impl PhaseExpansion {
    /// Class of each expanded coordinate.
    pub fn class_of(&self) -> Vec<usize> {
        self.labels.iter().map(|&(r, _)| r).collect()
    }

    /// Sums expanded counts per original class.
    pub fn aggregate(&self, x: &[u32]) -> Vec<u32> {
        let n = self.mean_service.len();
        let mut out = vec![0u32; n];
        for (j, &(r, _)) in self.labels.iter().enumerate() {
            out[r] += x[j];
        }
        out
    }

    /// `Σ_i ρ_(r,i)` for each original class.
    pub fn class_loads(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.mean_service.len()];
        for (j, &(r, _)) in self.labels.iter().enumerate() {
            out[r] += self.model.rho()[j];
        }
        out
    }
}

/// Replaces every class by its service phases.
///
/// The capacity constraint applies to per-class totals, so each column of
/// `A` is repeated once per phase. The model's own service rates are
/// superseded by the phase rates. Routing between classes is not supported
/// together with phases.
pub fn expand_phase_type(region: &CapacityRegion, model: &TrafficModel, phases: &[PhaseType]) -> Result<PhaseExpansion> {
    let n = model.num_classes();
    check_dim(region.num_classes(), n)?;
    if phases.len() != n {
        return Err(Error::InvalidModel(format!("{} phase-type laws given for {n} classes", phases.len())));
    }
    if model.has_routing() {
        return Err(Error::InvalidModel("phase-type expansion requires a model without class routing".into()));
    }
    let labels: Vec<(usize, usize)> =
        phases.iter().enumerate().flat_map(|(r, ph)| (0..ph.num_phases()).map(move |i| (r, i))).collect();
    let m = labels.len();
    let a = DMatrix::from_fn(region.num_links(), m, |l, j| region.incidence()[(l, labels[j].0)]);
    let expanded_region = CapacityRegion::from_matrix(a, region.capacities().to_vec())?;

    let nu_bar: Vec<f64> = labels.iter().map(|&(r, i)| model.nu()[r] * phases[r].alpha[i]).collect();
    let mu: Vec<f64> = labels.iter().map(|&(r, i)| phases[r].rates[i]).collect();
    let p = DMatrix::from_fn(m, m, |a, b| {
        let ((r, i), (s, j)) = (labels[a], labels[b]);
        if r == s {
            phases[r].routing[(i, j)]
        } else {
            0.0
        }
    });
    let expanded_model = TrafficModel::new(nu_bar, mu, p)?;
    let mean_service = phases.iter().map(PhaseType::mean).collect::<Result<Vec<_>>>()?;
    Ok(PhaseExpansion { region: expanded_region, model: expanded_model, labels, mean_service })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn traffic_examples() {
        let z = DMatrix::zeros(2, 2);
        assert_eq!(solve_traffic(&[1.0, 2.0], &z).unwrap(), vec![1.0, 2.0]);
        let nu = solve_traffic(&[1.0, 0.0], &mat(&[&[0.0, 0.5], &[0.0, 0.0]])).unwrap();
        assert!((nu[0] - 1.0).abs() < 1e-15 && (nu[1] - 0.5).abs() < 1e-15);
        let nu = solve_traffic(&[1.0, 1.0], &mat(&[&[0.0, 0.0], &[0.5, 0.0]])).unwrap();
        assert!((nu[0] - 1.5).abs() < 1e-15 && (nu[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn spectral_radius_examples() {
        let c = check_spectral_radius(&DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(c.radius, 0.0);
        assert!(c.certified);
        let c = check_spectral_radius(&mat(&[&[0.0, 0.5], &[0.5, 0.0]])).unwrap();
        assert!((c.radius - 0.5).abs() < 1e-12);
        assert!(c.certified);
        let c = check_spectral_radius(&mat(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        assert!(!c.certified);
        assert!(solve_traffic(&[1.0, 1.0], &mat(&[&[0.5, 0.5], &[0.0, 1.0]])).is_err());
    }

    #[test]
    fn reducible_defective_matrix_is_certified() {
        // Jordan-like chain: power iteration bounds close slowly here.
        let p = mat(&[&[0.9, 0.1, 0.0], &[0.0, 0.9, 0.1], &[0.0, 0.0, 0.9]]);
        let c = check_spectral_radius(&p).unwrap();
        assert!(c.certified);
        assert!((c.radius - 0.9).abs() < 1e-3);
    }

    #[test]
    fn invalid_routing_rejected() {
        assert!(check_spectral_radius(&mat(&[&[0.0, -0.1], &[0.0, 0.0]])).is_err());
        let err = check_spectral_radius(&mat(&[&[1.0, 0.5], &[0.0, 0.0]])).unwrap_err();
        assert!(err.to_string().contains("row 0"));
    }

    #[test]
    fn excursion_examples() {
        let model = TrafficModel::new(vec![1.0, 1.0], vec![1.0, 1.0], mat(&[&[0.0, 0.0], &[0.5, 0.0]])).unwrap();
        let e = remove_excursions(&model, &[]).unwrap();
        assert_eq!(e.nu_tilde.as_slice(), &[1.0, 1.0]);
        assert_eq!(e.p_tilde, *model.routing());
        let e = remove_excursions(&model, &[1]).unwrap();
        assert_eq!(e.kept, vec![0]);
        assert!((e.nu_tilde[0] - 1.5).abs() < 1e-15);
        assert_eq!(e.p_tilde[(0, 0)], 0.0);
        assert!(e.identity_residual(model.nu()).unwrap() < 1e-12);
        assert!(remove_excursions(&model, &[0, 1]).is_err());
    }

    #[test]
    fn drift_functional_examples() {
        let p = DMatrix::zeros(2, 2);
        assert_eq!(drift_functional(&p, &[0.0, 0.0], 0).unwrap(), 0.0);
        let f = drift_functional(&p, &[1.0, -2.0], 0).unwrap();
        assert!((f - (std::f64::consts::E - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn phase_type_means() {
        assert!((PhaseType::erlang(2, 3.0).unwrap().mean().unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let h = PhaseType::hyperexponential(vec![0.5, 0.5], vec![1.0, 2.0]).unwrap();
        assert!((h.mean().unwrap() - 0.75).abs() < 1e-15);
        assert!(PhaseType::new(vec![0.5, 0.4], vec![1.0, 1.0], DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn expansion_preserves_loads() {
        let region = CapacityRegion::single_link(2, 1.0).unwrap();
        let model = TrafficModel::without_routing(vec![0.3, 0.2], vec![1.0, 1.0]).unwrap();
        let phases = vec![
            PhaseType::erlang(2, 2.0).unwrap(),
            PhaseType::hyperexponential(vec![0.5, 0.5], vec![1.0, 2.0]).unwrap(),
        ];
        let ex = expand_phase_type(&region, &model, &phases).unwrap();
        assert_eq!(ex.labels, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(ex.region.num_classes(), 4);
        let loads = ex.class_loads();
        assert!((loads[0] - 0.3 * 1.0).abs() < 1e-12);
        assert!((loads[1] - 0.2 * 0.75).abs() < 1e-12);
        assert_eq!(ex.aggregate(&[1, 2, 3, 4]), vec![3, 7]);
    }

    #[test]
    fn single_phase_expansion_is_identity() {
        let region = CapacityRegion::two_link_three_class();
        let model = TrafficModel::without_routing(vec![0.4, 0.4, 0.4], vec![1.0, 2.0, 1.0]).unwrap();
        let phases: Vec<PhaseType> = model.mu().iter().map(|&m| PhaseType::exponential(m).unwrap()).collect();
        let ex = expand_phase_type(&region, &model, &phases).unwrap();
        assert_eq!(ex.region, region);
        assert_eq!(ex.model.rho(), model.rho());
    }
}
