//! Periodic box geometry.
//!
//! Sites of the side-`L` torus in `d` dimensions are indexed row-major over
//! coordinates: the first coordinate varies slowest. A bond is addressed by
//! `(site, axis)` and joins `site` to `site + e_axis` with periodic wrap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Torus {
    dim: usize,
    side: usize,
}

impl Torus {
    pub fn new(dim: usize, side: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid(format!(
                "dimension must be at least 2, got {dim}"
            )));
        }
        if side < 2 {
            return Err(Error::invalid(format!(
                "side must be at least 2, got {side}"
            )));
        }
        side.checked_pow(dim as u32)
            .filter(|&n| n <= u32::MAX as usize)
            .ok_or_else(|| Error::invalid(format!("box {side}^{dim} is too large")))?;
        Ok(Torus { dim, side })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn n_sites(&self) -> usize {
        self.side.pow(self.dim as u32)
    }

    #[inline]
    pub fn n_bonds(&self) -> usize {
        self.n_sites() * self.dim
    }

    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        self.side.pow((self.dim - 1 - axis) as u32)
    }

    #[inline]
    pub fn coord(&self, site: usize, axis: usize) -> usize {
        (site / self.stride(axis)) % self.side
    }

    pub fn coords(&self, site: usize) -> Vec<usize> {
        (0..self.dim).map(|a| self.coord(site, a)).collect()
    }

    pub fn site(&self, coords: &[usize]) -> usize {
        debug_assert_eq!(coords.len(), self.dim);
        coords
            .iter()
            .fold(0, |acc, &c| acc * self.side + (c % self.side))
    }

    /// `site + e_axis` with wrap.
    #[inline]
    pub fn forward(&self, site: usize, axis: usize) -> usize {
        let s = self.stride(axis);
        if (site / s) % self.side + 1 == self.side {
            site + s - self.side * s
        } else {
            site + s
        }
    }

    /// `site - e_axis` with wrap.
    #[inline]
    pub fn backward(&self, site: usize, axis: usize) -> usize {
        let s = self.stride(axis);
        if (site / s).is_multiple_of(self.side) {
            site + self.side * s - s
        } else {
            site - s
        }
    }

    #[inline]
    pub fn bond_index(&self, site: usize, axis: usize) -> usize {
        site * self.dim + axis
    }
}
