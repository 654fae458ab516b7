use crate::error::{Error, Result};

/// A permutation of token indices giving one scan order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScanPath(Vec<usize>);

impl ScanPath {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || seen[i] {
                return Err(Error::Validation(format!("scan order {order:?} is not a permutation")));
            }
            seen[i] = true;
        }
        Ok(ScanPath(order))
    }

    pub fn identity(len: usize) -> Self {
        ScanPath((0..len).collect())
    }

    pub fn reversed(&self) -> Self {
        ScanPath(self.0.iter().rev().copied().collect())
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (pos, &i) in self.0.iter().enumerate() {
            inv[i] = pos;
        }
        ScanPath(inv)
    }

    /// `self` applied after `first`: position `i` reads `first[self[i]]`.
    pub fn compose(&self, first: &ScanPath) -> Self {
        ScanPath(self.0.iter().map(|&i| first.0[i]).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}
