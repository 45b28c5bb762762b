//! Polyhedral capacity regions `C = {λ ≥ 0 : Aλ ≤ c}`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Absolute slack allowed on each link constraint by membership tests.
pub const FEAS_TOL: f64 = 1e-9;

/// A polyhedral capacity region: links × classes incidence `a` with
/// nonnegative entries and positive link capacities `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct CapacityRegion {
    a: DMatrix<f64>,
    c: Vec<f64>,
}

/// A face of the positive orthant: the classes in `zero_set` are empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Face {
    pub zero_set: Vec<usize>,
    pub support: Vec<usize>,
}

impl Face {
    pub fn new(num_classes: usize, zero_set: &[usize]) -> Result<Self> {
        let mut zero: Vec<usize> = zero_set.to_vec();
        zero.sort_unstable();
        zero.dedup();
        if let Some(&bad) = zero.iter().find(|&&r| r >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "class {bad} out of range for {num_classes} classes"
            )));
        }
        let support = (0..num_classes).filter(|r| zero.binary_search(r).is_err()).collect();
        Ok(Face { zero_set: zero, support })
    }

    /// Face on which `x` lies: the zero coordinates of `x`.
    pub fn of(x: &[f64]) -> Self {
        let zero_set = (0..x.len()).filter(|&r| x[r] <= 0.0).collect();
        let support = (0..x.len()).filter(|&r| x[r] > 0.0).collect();
        Face { zero_set, support }
    }
}

impl CapacityRegion {
    /// Builds a region from row-major link rows.
    pub fn new(rows: Vec<Vec<f64>>, c: Vec<f64>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidRegion("no links".into()));
        }
        let num_classes = rows[0].len();
        if num_classes == 0 {
            return Err(Error::InvalidRegion("no classes".into()));
        }
        if rows.iter().any(|row| row.len() != num_classes) {
            return Err(Error::InvalidRegion("ragged incidence matrix".into()));
        }
        check_dim(rows.len(), c.len()).map_err(|_| {
            Error::InvalidRegion(format!("{} links but {} capacities", rows.len(), c.len()))
        })?;
        let a = DMatrix::from_fn(rows.len(), num_classes, |l, r| rows[l][r]);
        Self::from_matrix(a, c)
    }

    pub fn from_matrix(a: DMatrix<f64>, c: Vec<f64>) -> Result<Self> {
        check_dim(a.nrows(), c.len())?;
        if a.nrows() == 0 || a.ncols() == 0 {
            return Err(Error::InvalidRegion("empty incidence matrix".into()));
        }
        for (l, &cap) in c.iter().enumerate() {
            if !(cap.is_finite() && cap > 0.0) {
                return Err(Error::InvalidRegion(format!("capacity of link {l} must be positive, got {cap}")));
            }
        }
        for v in a.iter() {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(Error::InvalidRegion(format!("incidence entries must be finite and nonnegative, got {v}")));
            }
        }
        for l in 0..a.nrows() {
            if a.row(l).iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidRegion(format!("link {l} constrains no class")));
            }
        }
        for r in 0..a.ncols() {
            if a.column(r).iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidRegion(format!("class {r} uses no link, region is unbounded")));
            }
        }
        Ok(CapacityRegion { a, c })
    }

    /// A single link of capacity `cap` shared by `classes` classes.
    pub fn single_link(classes: usize, cap: f64) -> Result<Self> {
        Self::new(vec![vec![1.0; classes]], vec![cap])
    }

    pub fn num_classes(&self) -> usize {
        self.a.ncols()
    }

    pub fn num_links(&self) -> usize {
        self.a.nrows()
    }

    pub fn incidence(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn capacities(&self) -> &[f64] {
        &self.c
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.num_links()).map(|l| self.a.row(l).iter().cloned().collect()).collect()
    }

    /// Per-link load `Aλ`.
    pub fn load(&self, lambda: &[f64]) -> Vec<f64> {
        (0..self.num_links())
            .map(|l| (0..self.num_classes()).map(|r| self.a[(l, r)] * lambda[r]).sum())
            .collect()
    }

    /// Per-link slack `c - Aλ` (negative when violated).
    pub fn slack(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.num_classes(), lambda.len())?;
        Ok(self.load(lambda).iter().zip(&self.c).map(|(l, c)| c - l).collect())
    }

    /// Smallest slack over links, `min_ℓ (c - Aλ)_ℓ`.
    pub fn min_slack(&self, lambda: &[f64]) -> Result<f64> {
        Ok(self.slack(lambda)?.into_iter().fold(f64::INFINITY, f64::min))
    }

    /// Membership in `C` with absolute slack [`FEAS_TOL`].
    pub fn contains(&self, lambda: &[f64]) -> Result<bool> {
        let s = self.slack(lambda)?;
        Ok(lambda.iter().all(|&v| v >= -FEAS_TOL) && s.iter().all(|&v| v >= -FEAS_TOL))
    }

    /// Strict interior membership for a load vector: every link has slack
    /// strictly larger than `margin`.
    pub fn in_interior_with_margin(&self, rho: &[f64], margin: f64) -> Result<bool> {
        let s = self.slack(rho)?;
        if rho.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("load vector has negative entries".into()));
        }
        Ok(s.iter().all(|&v| v > margin))
    }

    pub fn in_interior(&self, rho: &[f64]) -> Result<bool> {
        self.in_interior_with_margin(rho, FEAS_TOL)
    }

    /// Region over `face.support` only; links left without any class are dropped.
    pub fn face_restrict(&self, face: &Face) -> Result<CapacityRegion> {
        if face.support.is_empty() {
            return Err(Error::InvalidArgument("face has empty support".into()));
        }
        let keep: Vec<usize> = (0..self.num_links())
            .filter(|&l| face.support.iter().any(|&r| self.a[(l, r)] > 0.0))
            .collect();
        let a = DMatrix::from_fn(keep.len(), face.support.len(), |i, j| self.a[(keep[i], face.support[j])]);
        let c = keep.iter().map(|&l| self.c[l]).collect();
        CapacityRegion::from_matrix(a, c)
    }

    /// Largest feasible rate of each class when it is alone: `min_ℓ c_ℓ / A_ℓr`.
    pub fn max_class_rate(&self, r: usize) -> f64 {
        (0..self.num_links())
            .filter(|&l| self.a[(l, r)] > 0.0)
            .map(|l| self.c[l] / self.a[(l, r)])
            .fold(f64::INFINITY, f64::min)
    }

    /// The two-link, three-class example: classes 0 and 1 each use one unit
    /// link, class 2 crosses both.
    pub fn two_link_three_class() -> Self {
        Self::new(vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]], vec![1.0, 1.0]).expect("valid region")
    }

    /// Line network with `links` unit links: class 0 crosses every link,
    /// class `l + 1` uses link `l` only.
    pub fn line(links: usize) -> Self {
        let rows = (0..links)
            .map(|l| {
                let mut row = vec![0.0; links + 1];
                row[0] = 1.0;
                row[l + 1] = 1.0;
                row
            })
            .collect();
        Self::new(rows, vec![1.0; links]).expect("valid region")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contains_examples() {
        let fig = CapacityRegion::two_link_three_class();
        assert!(fig.contains(&[0.5, 0.5, 0.4]).unwrap());
        assert!(fig.contains(&[0.0, 0.0, 0.0]).unwrap());
        let single = CapacityRegion::single_link(1, 1.0).unwrap();
        assert!(!single.contains(&[1.1]).unwrap());
        assert!(matches!(fig.contains(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn interior_examples() {
        let fig = CapacityRegion::two_link_three_class();
        assert!(fig.in_interior(&[0.4, 0.4, 0.4]).unwrap());
        assert!(!fig.in_interior(&[0.6, 0.6, 0.4]).unwrap());
        let single = CapacityRegion::single_link(1, 1.0).unwrap();
        assert!(!single.in_interior(&[0.999999999]).unwrap());
    }

    #[test]
    fn face_restriction_examples() {
        let fig = CapacityRegion::two_link_three_class();
        let f = fig.face_restrict(&Face::new(3, &[2]).unwrap()).unwrap();
        assert_eq!(f.num_classes(), 2);
        assert_eq!(f.rows(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);

        let same = fig.face_restrict(&Face::new(3, &[]).unwrap()).unwrap();
        assert_eq!(same, fig);

        let only3 = fig.face_restrict(&Face::new(3, &[0, 1]).unwrap()).unwrap();
        assert_eq!(only3.num_classes(), 1);
        assert_eq!(only3.num_links(), 2);
        assert_eq!(only3.max_class_rate(0), 1.0);

        assert!(fig.face_restrict(&Face::new(3, &[0, 1, 2]).unwrap()).is_err());
    }

    #[test]
    fn construction_invariants() {
        assert!(CapacityRegion::new(vec![vec![1.0, 0.0]], vec![1.0]).is_err());
        assert!(CapacityRegion::new(vec![vec![1.0], vec![0.0]], vec![1.0, 1.0]).is_err());
        assert!(CapacityRegion::new(vec![vec![1.0]], vec![0.0]).is_err());
        assert!(CapacityRegion::new(vec![vec![-1.0]], vec![1.0]).is_err());
        assert!(CapacityRegion::new(vec![], vec![]).is_err());
    }
}
