//! Dense indexing of the lattice box `[0, N]^R`.

use crate::error::{Error, Result};

/// The box `{x ∈ Z_+^R : x_r ≤ bound}` with mixed-radix indexing.
///
/// Index order is lexicographic with the last coordinate varying fastest,
/// so `x - e_r` always has a smaller index than `x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatticeBox {
    dim: usize,
    bound: u32,
}

impl LatticeBox {
    pub fn new(dim: usize, bound: u32) -> Self {
        LatticeBox { dim, bound }
    }

    /// Like [`LatticeBox::new`] but refuses boxes above `budget` points.
    pub fn with_budget(dim: usize, bound: u32, budget: usize) -> Result<Self> {
        let needed = (bound as u128 + 1).checked_pow(dim as u32).unwrap_or(u128::MAX);
        if needed > budget as u128 {
            return Err(Error::Budget { needed, budget });
        }
        Ok(LatticeBox { dim, bound })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bound(&self) -> u32 {
        self.bound
    }

    pub fn len(&self) -> usize {
        (self.bound as usize + 1).pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, x: &[u32]) -> bool {
        x.len() == self.dim && x.iter().all(|&v| v <= self.bound)
    }

    pub fn index(&self, x: &[u32]) -> Option<usize> {
        if !self.contains(x) {
            return None;
        }
        let radix = self.bound as usize + 1;
        Some(x.iter().fold(0usize, |acc, &v| acc * radix + v as usize))
    }

    pub fn point(&self, mut index: usize) -> Vec<u32> {
        let radix = self.bound as usize + 1;
        let mut x = vec![0u32; self.dim];
        for slot in x.iter_mut().rev() {
            *slot = (index % radix) as u32;
            index /= radix;
        }
        x
    }

    /// Stride of coordinate `r` in the flat index.
    pub fn stride(&self, r: usize) -> usize {
        (self.bound as usize + 1).pow((self.dim - 1 - r) as u32)
    }

    /// All points in index order.
    pub fn points(&self) -> impl Iterator<Item = Vec<u32>> + '_ {
        (0..self.len()).map(move |i| self.point(i))
    }

    /// Indices ordered by level `Σ x_r`, lexicographic within a level.
    pub fn level_order(&self) -> Vec<usize> {
        let mut order: Vec<(u64, usize)> = (0..self.len())
            .map(|i| (self.point(i).iter().map(|&v| v as u64).sum(), i))
            .collect();
        order.sort_unstable();
        order.into_iter().map(|(_, i)| i).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_round_trip() {
        let b = LatticeBox::new(3, 4);
        assert_eq!(b.len(), 125);
        for i in 0..b.len() {
            assert_eq!(b.index(&b.point(i)), Some(i));
        }
        assert_eq!(b.index(&[5, 0, 0]), None);
    }

    #[test]
    fn predecessors_have_smaller_index() {
        let b = LatticeBox::new(2, 3);
        for x in b.points() {
            let i = b.index(&x).unwrap();
            for r in 0..2 {
                if x[r] > 0 {
                    assert_eq!(i - b.stride(r), {
                        let mut y = x.clone();
                        y[r] -= 1;
                        b.index(&y).unwrap()
                    });
                }
            }
        }
    }

    #[test]
    fn budget_is_enforced() {
        assert!(matches!(
            LatticeBox::with_budget(4, 15, 1000),
            Err(Error::Budget { needed: 65536, .. })
        ));
    }

    #[test]
    fn level_order_is_by_total() {
        let b = LatticeBox::new(2, 2);
        let levels: Vec<u32> = b
            .level_order()
            .into_iter()
            .map(|i| b.point(i).iter().sum())
            .collect();
        assert!(levels.windows(2).all(|w| w[0] <= w[1]));
    }
}
