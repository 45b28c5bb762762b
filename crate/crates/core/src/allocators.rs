//! Allocation rules on lattice states: PF, (w,α)-fair, modified PF and
//! balanced fairness, behind one trait.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::capacity::CapacityRegion;
use crate::error::{check_dim, Error, Result};
use crate::lattice::LatticeBox;
use crate::linalg::logsumexp;
use crate::pf_solver::{alpha_fair_allocate, legendre, pf_allocate};

/// Default cap on balance-table entries.
pub const TABLE_BUDGET: usize = 1 << 26;

/// Rate allocation as a function of the population state.
pub trait Allocator: Send + Sync {
    fn num_classes(&self) -> usize;

    /// Rates at `x`; classes with `x_r = 0` get exactly 0.
    fn rates(&self, x: &[u32]) -> Result<Vec<f64>>;

    fn label(&self) -> String;
}

/// Which allocation rule to use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKind", into = "RawKind")]
pub enum AllocatorKind {
    Pf,
    PfPrime,
    Bf,
    AlphaFair { w: Vec<f64>, alpha: f64 },
}

/// Wire form of [`AllocatorKind`]: `{"kind": ..., "w": ..., "alpha": ...}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKind {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    w: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
}

impl TryFrom<RawKind> for AllocatorKind {
    type Error = String;

    fn try_from(raw: RawKind) -> std::result::Result<Self, String> {
        let simple = |k: AllocatorKind| {
            if raw.w.is_some() || raw.alpha.is_some() {
                Err(format!("allocator.kind = {:?} takes no w or alpha", raw.kind))
            } else {
                Ok(k)
            }
        };
        match raw.kind.as_str() {
            "pf" => simple(AllocatorKind::Pf),
            "pf_prime" => simple(AllocatorKind::PfPrime),
            "bf" => simple(AllocatorKind::Bf),
            "alpha_fair" => {
                let alpha = raw.alpha.ok_or("allocator.alpha is required for alpha_fair")?;
                let w = raw.w.ok_or("allocator.w is required for alpha_fair")?;
                Ok(AllocatorKind::AlphaFair { w, alpha })
            }
            other => Err(format!("allocator.kind {other:?} is not one of pf, pf_prime, bf, alpha_fair")),
        }
    }
}

impl From<AllocatorKind> for RawKind {
    fn from(k: AllocatorKind) -> Self {
        let kind = match &k {
            AllocatorKind::Pf => "pf",
            AllocatorKind::PfPrime => "pf_prime",
            AllocatorKind::Bf => "bf",
            AllocatorKind::AlphaFair { .. } => "alpha_fair",
        }
        .to_string();
        match k {
            AllocatorKind::AlphaFair { w, alpha } => RawKind { kind, w: Some(w), alpha: Some(alpha) },
            _ => RawKind { kind, w: None, alpha: None },
        }
    }
}

impl std::str::FromStr for AllocatorKind {
    type Err = Error;

    /// Parses `pf`, `pf_prime`, `bf`; `alpha_fair` needs the JSON form.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pf" => Ok(AllocatorKind::Pf),
            "pf_prime" | "pf-prime" => Ok(AllocatorKind::PfPrime),
            "bf" => Ok(AllocatorKind::Bf),
            other => Err(Error::InvalidArgument(format!("unknown allocator {other:?}"))),
        }
    }
}

impl AllocatorKind {
    pub fn label(&self) -> String {
        match self {
            AllocatorKind::Pf => "pf".into(),
            AllocatorKind::PfPrime => "pf_prime".into(),
            AllocatorKind::Bf => "bf".into(),
            AllocatorKind::AlphaFair { alpha, .. } => format!("alpha_fair({alpha})"),
        }
    }
}

fn real(x: &[u32]) -> Vec<f64> {
    x.iter().map(|&v| v as f64).collect()
}

/// Proportional fairness.
#[derive(Debug, Clone)]
pub struct Pf {
    region: CapacityRegion,
}

impl Pf {
    pub fn new(region: CapacityRegion) -> Self {
        Pf { region }
    }
}

impl Allocator for Pf {
    fn num_classes(&self) -> usize {
        self.region.num_classes()
    }

    fn rates(&self, x: &[u32]) -> Result<Vec<f64>> {
        Ok(pf_allocate(&self.region, &real(x))?.rates)
    }

    fn label(&self) -> String {
        "pf".into()
    }
}

/// (w,α)-fairness.
#[derive(Debug, Clone)]
pub struct AlphaFair {
    region: CapacityRegion,
    w: Vec<f64>,
    alpha: f64,
}

impl AlphaFair {
    pub fn new(region: CapacityRegion, w: Vec<f64>, alpha: f64) -> Result<Self> {
        check_dim(region.num_classes(), w.len())?;
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
        }
        if w.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument("weights must be positive".into()));
        }
        Ok(AlphaFair { region, w, alpha })
    }
}

impl Allocator for AlphaFair {
    fn num_classes(&self) -> usize {
        self.region.num_classes()
    }

    fn rates(&self, x: &[u32]) -> Result<Vec<f64>> {
        Ok(alpha_fair_allocate(&self.region, &real(x), &self.w, self.alpha)?.rates)
    }

    fn label(&self) -> String {
        format!("alpha_fair({})", self.alpha)
    }
}

/// `λ_r = exp(δ*(x) - δ*(x - e_r))` for `x_r > 0`, else 0.
pub fn pf_prime_rates(region: &CapacityRegion, x: &[u32]) -> Result<Vec<f64>> {
    PfPrime::new(region.clone()).rates(x)
}

/// Modified proportional fairness, with a memo of conjugate values.
#[derive(Debug)]
pub struct PfPrime {
    region: CapacityRegion,
    memo: Mutex<HashMap<Vec<u32>, f64>>,
}

impl PfPrime {
    pub fn new(region: CapacityRegion) -> Self {
        PfPrime { region, memo: Mutex::new(HashMap::new()) }
    }

    /// `δ*(x)` on a lattice point, memoised.
    pub fn conjugate(&self, x: &[u32]) -> Result<f64> {
        check_dim(self.region.num_classes(), x.len())?;
        if let Some(&v) = self.memo.lock().expect("memo lock").get(x) {
            return Ok(v);
        }
        let v = legendre(&self.region, &real(x))?;
        let mut memo = self.memo.lock().expect("memo lock");
        if memo.len() >= 1 << 22 {
            memo.clear();
        }
        memo.insert(x.to_vec(), v);
        Ok(v)
    }
}

impl Allocator for PfPrime {
    fn num_classes(&self) -> usize {
        self.region.num_classes()
    }

    fn rates(&self, x: &[u32]) -> Result<Vec<f64>> {
        let here = self.conjugate(x)?;
        let mut y = x.to_vec();
        let mut out = vec![0.0; x.len()];
        for r in 0..x.len() {
            if x[r] == 0 {
                continue;
            }
            y[r] -= 1;
            out[r] = (here - self.conjugate(&y)?).exp();
            y[r] += 1;
        }
        Ok(out)
    }

    fn label(&self) -> String {
        "pf_prime".into()
    }
}

/// `φ = -log ψ` of balanced fairness over the box `[0, N]^R`.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceTable {
    region: CapacityRegion,
    lattice: LatticeBox,
    phi: Vec<f64>,
}

/// Fills the balance table on `[0, N]^R` under the default budget.
pub fn build_balance_table(region: &CapacityRegion, bound: u32) -> Result<BalanceTable> {
    BalanceTable::build(region, bound, TABLE_BUDGET)
}

impl BalanceTable {
    /// Fills `φ(x) = min_ℓ [log c_ℓ - logsumexp_{r ∈ ℓ, x_r > 0}(log A_ℓr - φ(x - e_r))]`
    /// with `φ(0) = 0`.
    ///
    /// Points are visited in flat index order, in which every `x - e_r`
    /// precedes `x`; the values do not depend on the visiting order.
    pub fn build(region: &CapacityRegion, bound: u32, budget: usize) -> Result<Self> {
        if bound < 1 {
            return Err(Error::InvalidArgument("balance table bound must be at least 1".into()));
        }
        let n = region.num_classes();
        let lattice = LatticeBox::with_budget(n, bound, budget)?;
        let a = region.incidence();
        // Per link: (class, log A_ℓr) for the classes it carries.
        let links: Vec<(f64, Vec<(usize, f64)>)> = (0..region.num_links())
            .map(|l| {
                let members = (0..n).filter(|&r| a[(l, r)] > 0.0).map(|r| (r, a[(l, r)].ln())).collect();
                (region.capacities()[l].ln(), members)
            })
            .collect();
        let strides: Vec<usize> = (0..n).map(|r| lattice.stride(r)).collect();
        let mut phi = vec![0.0; lattice.len()];
        let mut x = vec![0u32; n];
        let mut terms = Vec::with_capacity(n);
        for idx in 1..lattice.len() {
            // Advance the mixed-radix counter to `idx`.
            for r in (0..n).rev() {
                if x[r] < bound {
                    x[r] += 1;
                    break;
                }
                x[r] = 0;
            }
            let mut best = f64::INFINITY;
            for (log_c, members) in &links {
                terms.clear();
                terms.extend(members.iter().filter(|&&(r, _)| x[r] > 0).map(|&(r, la)| la - phi[idx - strides[r]]));
                if terms.is_empty() {
                    continue;
                }
                best = best.min(log_c - logsumexp(terms.iter().cloned()));
            }
            phi[idx] = best;
        }
        Ok(BalanceTable { region: region.clone(), lattice, phi })
    }

    pub fn region(&self) -> &CapacityRegion {
        &self.region
    }

    pub fn lattice(&self) -> LatticeBox {
        self.lattice
    }

    pub fn bound(&self) -> u32 {
        self.lattice.bound()
    }

    pub fn values(&self) -> &[f64] {
        &self.phi
    }

    /// `φ(x)`, or an error outside the box.
    pub fn phi(&self, x: &[u32]) -> Result<f64> {
        check_dim(self.lattice.dim(), x.len())?;
        self.lattice
            .index(x)
            .map(|i| self.phi[i])
            .ok_or_else(|| Error::OutOfBox { state: x.to_vec(), bound: self.lattice.bound() })
    }

    /// `λ_r = ψ(x - e_r)/ψ(x) = exp(φ(x) - φ(x - e_r))` for `x_r > 0`, else 0.
    pub fn bf_rates(&self, x: &[u32]) -> Result<Vec<f64>> {
        let here = self.phi(x)?;
        let idx = self.lattice.index(x).expect("checked by phi");
        Ok((0..x.len())
            .map(|r| if x[r] == 0 { 0.0 } else { (here - self.phi[idx - self.lattice.stride(r)]).exp() })
            .collect())
    }

    /// `max_{x ≠ 0} |max_ℓ (A λ^BF(x))_ℓ / c_ℓ - 1|`: zero exactly when
    /// every BF allocation on the box is feasible with a tight link.
    pub fn extremality_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for x in self.lattice.points().skip(1) {
            let rates = self.bf_rates(&x).expect("box point");
            let peak = self
                .region
                .load(&rates)
                .iter()
                .zip(self.region.capacities())
                .map(|(l, c)| l / c)
                .fold(f64::NEG_INFINITY, f64::max);
            worst = worst.max((peak - 1.0).abs());
        }
        worst
    }

    /// Adds `delta` to one stored `φ` value. Exists so verification can
    /// confirm that its checks notice a corrupted table.
    pub fn perturb(&mut self, x: &[u32], delta: f64) -> Result<()> {
        check_dim(self.lattice.dim(), x.len())?;
        let i = self
            .lattice
            .index(x)
            .ok_or_else(|| Error::OutOfBox { state: x.to_vec(), bound: self.lattice.bound() })?;
        self.phi[i] += delta;
        Ok(())
    }
}

/// `bf_rates` on a shared table.
#[derive(Debug, Clone)]
pub struct Bf {
    table: Arc<BalanceTable>,
}

impl Bf {
    pub fn new(table: Arc<BalanceTable>) -> Self {
        Bf { table }
    }

    pub fn table(&self) -> &BalanceTable {
        &self.table
    }
}

impl Allocator for Bf {
    fn num_classes(&self) -> usize {
        self.table.region().num_classes()
    }

    fn rates(&self, x: &[u32]) -> Result<Vec<f64>> {
        self.table.bf_rates(x)
    }

    fn label(&self) -> String {
        "bf".into()
    }
}

/// Runs a class-level allocator on a phase-expanded state: the rate of a
/// class is computed from its total count and split among its phases in
/// proportion to their counts (processor sharing within the class).
pub struct PhaseSharing {
    inner: Box<dyn Allocator>,
    class_of: Vec<usize>,
}

impl PhaseSharing {
    pub fn new(inner: Box<dyn Allocator>, class_of: Vec<usize>) -> Result<Self> {
        if class_of.iter().any(|&r| r >= inner.num_classes()) {
            return Err(Error::InvalidArgument("phase label refers to an unknown class".into()));
        }
        Ok(PhaseSharing { inner, class_of })
    }
}

impl Allocator for PhaseSharing {
    fn num_classes(&self) -> usize {
        self.class_of.len()
    }

    fn rates(&self, x: &[u32]) -> Result<Vec<f64>> {
        check_dim(self.class_of.len(), x.len())?;
        let mut totals = vec![0u32; self.inner.num_classes()];
        for (j, &r) in self.class_of.iter().enumerate() {
            totals[r] += x[j];
        }
        let class_rates = self.inner.rates(&totals)?;
        Ok(self
            .class_of
            .iter()
            .enumerate()
            .map(|(j, &r)| if x[j] == 0 { 0.0 } else { class_rates[r] * x[j] as f64 / totals[r] as f64 })
            .collect())
    }

    fn label(&self) -> String {
        format!("{} (per phase)", self.inner.label())
    }
}

/// Builds an allocator. Balanced fairness needs a table bound.
pub fn build_allocator(kind: &AllocatorKind, region: &CapacityRegion, table_bound: Option<u32>) -> Result<Box<dyn Allocator>> {
    Ok(match kind {
        AllocatorKind::Pf => Box::new(Pf::new(region.clone())),
        AllocatorKind::PfPrime => Box::new(PfPrime::new(region.clone())),
        AllocatorKind::AlphaFair { w, alpha } => Box::new(AlphaFair::new(region.clone(), w.clone(), *alpha)?),
        AllocatorKind::Bf => {
            let bound = table_bound
                .ok_or_else(|| Error::InvalidArgument("balanced fairness needs a balance-table bound".into()))?;
            Box::new(Bf::new(Arc::new(build_balance_table(region, bound.max(1))?)))
        }
    })
}

/// What an allocation needs besides the state.
#[derive(Debug, Clone)]
pub struct AllocationContext {
    pub region: CapacityRegion,
    pub table: Option<Arc<BalanceTable>>,
}

/// One-shot allocation of the given kind at `x`.
pub fn allocate(kind: &AllocatorKind, ctx: &AllocationContext, x: &[u32]) -> Result<Vec<f64>> {
    check_dim(ctx.region.num_classes(), x.len())?;
    match kind {
        AllocatorKind::Bf => match &ctx.table {
            Some(t) => t.bf_rates(x),
            None => build_balance_table(&ctx.region, x.iter().cloned().max().unwrap_or(0).max(1))?.bf_rates(x),
        },
        other => build_allocator(other, &ctx.region, None)?.rates(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extremality_detects_corruption() {
        let region = CapacityRegion::two_link_three_class();
        let mut table = build_balance_table(&region, 4).unwrap();
        assert!(table.extremality_residual() < 1e-12);
        table.perturb(&[2, 1, 3], 0.1).unwrap();
        assert!(table.extremality_residual() > 0.05);
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn ln_binom(n: u32, k: u32) -> f64 {
        (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum()
    }

    #[test]
    fn pf_prime_examples() {
        let unit = CapacityRegion::single_link(2, 1.0).unwrap();
        assert!(close(&pf_prime_rates(&unit, &[1, 1]).unwrap(), &[0.25, 0.25], 1e-9));
        assert_eq!(pf_prime_rates(&unit, &[0, 0]).unwrap(), vec![0.0, 0.0]);
        let one = CapacityRegion::single_link(1, 2.5).unwrap();
        for n in 1..6 {
            assert!(close(&pf_prime_rates(&one, &[n]).unwrap(), &[2.5], 1e-9));
        }
    }

    #[test]
    fn balance_table_on_unit_link_is_binomial() {
        let unit = CapacityRegion::single_link(2, 1.0).unwrap();
        let t = build_balance_table(&unit, 6).unwrap();
        assert_eq!(t.phi(&[0, 0]).unwrap(), 0.0);
        assert!((t.phi(&[1, 1]).unwrap() + 2f64.ln()).abs() < 1e-15);
        for x in t.lattice().points() {
            let expected = -ln_binom(x[0] + x[1], x[0]);
            assert!((t.phi(&x).unwrap() - expected).abs() < 1e-12, "{x:?}");
        }
        assert!(close(&t.bf_rates(&[1, 1]).unwrap(), &[0.5, 0.5], 1e-12));
        assert!(close(&t.bf_rates(&[3, 1]).unwrap(), &[0.75, 0.25], 1e-12));
        assert_eq!(t.bf_rates(&[0, 0]).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(t.bf_rates(&[7, 0]), Err(Error::OutOfBox { .. })));
    }

    #[test]
    fn balance_table_single_class() {
        let one = CapacityRegion::single_link(1, 3.0).unwrap();
        let t = build_balance_table(&one, 5).unwrap();
        for n in 0..=5u32 {
            assert!((t.phi(&[n]).unwrap() - n as f64 * 3f64.ln()).abs() < 1e-13);
        }
    }

    #[test]
    fn balance_table_budget() {
        let r = CapacityRegion::single_link(4, 1.0).unwrap();
        assert!(matches!(BalanceTable::build(&r, 9, 1000), Err(Error::Budget { .. })));
        assert!(build_balance_table(&r, 0).is_err());
    }

    #[test]
    fn dispatch_examples() {
        let fig = AllocationContext { region: CapacityRegion::two_link_three_class(), table: None };
        let pf = allocate(&AllocatorKind::Pf, &fig, &[1, 1, 1]).unwrap();
        assert!(close(&pf, &[2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0], 1e-9));
        let unit = AllocationContext { region: CapacityRegion::single_link(2, 1.0).unwrap(), table: None };
        assert!(close(&allocate(&AllocatorKind::PfPrime, &unit, &[1, 1]).unwrap(), &[0.25, 0.25], 1e-9));
        assert!(close(&allocate(&AllocatorKind::Bf, &unit, &[3, 1]).unwrap(), &[0.75, 0.25], 1e-12));
        let af = AllocatorKind::AlphaFair { w: vec![1.0, 1.0], alpha: 2.0 };
        assert!(close(&allocate(&af, &unit, &[2, 1]).unwrap(), &[2.0 / 3.0, 1.0 / 3.0], 1e-9));
    }

    #[test]
    fn phase_sharing_splits_by_count() {
        let unit = CapacityRegion::single_link(2, 1.0).unwrap();
        let alloc = PhaseSharing::new(Box::new(Pf::new(unit)), vec![0, 0, 1]).unwrap();
        let r = alloc.rates(&[1, 2, 1]).unwrap();
        assert!(close(&r, &[0.25, 0.5, 0.25], 1e-9));
        assert_eq!(alloc.rates(&[0, 0, 2]).unwrap()[0], 0.0);
    }

    #[test]
    fn allocator_kind_json() {
        let k: AllocatorKind = serde_json::from_str(r#"{"kind":"alpha_fair","w":[1,2],"alpha":2}"#).unwrap();
        assert_eq!(k, AllocatorKind::AlphaFair { w: vec![1.0, 2.0], alpha: 2.0 });
        let k: AllocatorKind = serde_json::from_str(r#"{"kind":"pf_prime"}"#).unwrap();
        assert_eq!(k, AllocatorKind::PfPrime);
        assert!(serde_json::from_str::<AllocatorKind>(r#"{"kind":"pf","extra":1}"#).is_err());
        assert!(serde_json::from_str::<AllocatorKind>(r#"{"kind":"pf","alpha":1}"#).is_err());
        assert!(serde_json::from_str::<AllocatorKind>(r#"{"kind":"alpha_fair","w":[1]}"#).is_err());
        let back = serde_json::to_string(&AllocatorKind::AlphaFair { w: vec![1.0], alpha: 0.5 }).unwrap();
        assert_eq!(serde_json::from_str::<AllocatorKind>(&back).unwrap(), AllocatorKind::AlphaFair { w: vec![1.0], alpha: 0.5 });
    }
}
