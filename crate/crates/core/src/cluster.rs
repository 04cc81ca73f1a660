//! Connected components of the positive-conductance graph and the giant cluster.

use std::mem;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{sample_field, ConductanceField, FieldLaw};
use crate::error::{Error, Result};
use crate::lattice::Torus;
use crate::numeric::MeanStderr;
use crate::streams::derive_seed;

const NONE: u32 = u32::MAX;

#[derive(Debug)]
pub struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl UnionFind {
    pub fn new(len: usize) -> Self {
        UnionFind {
            parent: (0..len as u32).collect(),
            size: vec![1; len],
        }
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut x = x as u32;
        while self.parent[x as usize] != x {
            let up = self.parent[x as usize];
            self.parent[x as usize] = self.parent[up as usize];
            x = up;
        }
        x as usize
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let mut ra = self.find(a);
        let mut rb = self.find(b);
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra as u32;
        self.size[ra] += self.size[rb];
    }
}

/// Component structure of `G(ω)` on the torus.
///
/// Component ids are assigned in order of each component's smallest site, so
/// the giant tie-break (smallest minimal site) is the smallest id among the
/// largest components. Giant sites are listed in ascending site order; that
/// list defines the compact indexing used by every per-cluster vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLabeling {
    torus: Torus,
    component_id: Vec<u32>,
    component_sizes: Vec<usize>,
    giant_id: Option<usize>,
    giant_sites: Vec<usize>,
    giant_index: Vec<u32>,
}

impl ClusterLabeling {
    pub fn torus(&self) -> &Torus {
        &self.torus
    }

    /// `None` for sites with no incident positive bond.
    pub fn component(&self, site: usize) -> Option<usize> {
        match self.component_id[site] {
            NONE => None,
            id => Some(id as usize),
        }
    }

    pub fn component_sizes(&self) -> &[usize] {
        &self.component_sizes
    }

    pub fn n_components(&self) -> usize {
        self.component_sizes.len()
    }

    pub fn giant_id(&self) -> Option<usize> {
        self.giant_id
    }

    pub fn giant_size(&self) -> usize {
        self.giant_sites.len()
    }

    pub fn giant_sites(&self) -> &[usize] {
        &self.giant_sites
    }

    #[inline]
    pub fn in_giant(&self, site: usize) -> bool {
        self.giant_index[site] != NONE
    }

    /// Compact index of `site` within the giant, if it belongs to it.
    #[inline]
    pub fn giant_index(&self, site: usize) -> Option<usize> {
        match self.giant_index[site] {
            NONE => None,
            i => Some(i as usize),
        }
    }

    pub fn giant_mask(&self) -> Vec<bool> {
        self.giant_index.iter().map(|&i| i != NONE).collect()
    }

    pub fn m_hat(&self) -> f64 {
        self.giant_sites.len() as f64 / self.torus.n_sites() as f64
    }

    /// Labeling whose "giant" is an arbitrary site mask; used to exercise the
    /// masked operators on non-cluster subsets.
    pub fn from_mask(torus: Torus, mask: &[bool]) -> Result<Self> {
        if mask.len() != torus.n_sites() {
            return Err(Error::DimensionMismatch {
                expected: torus.n_sites(),
                actual: mask.len(),
            });
        }
        let giant_sites: Vec<usize> = (0..mask.len()).filter(|&s| mask[s]).collect();
        let mut giant_index = vec![NONE; mask.len()];
        for (i, &s) in giant_sites.iter().enumerate() {
            giant_index[s] = i as u32;
        }
        let component_id = mask.iter().map(|&m| if m { 0 } else { NONE }).collect();
        let any = !giant_sites.is_empty();
        Ok(ClusterLabeling {
            torus,
            component_id,
            component_sizes: if any { vec![giant_sites.len()] } else { vec![] },
            giant_id: any.then_some(0),
            giant_sites,
            giant_index,
        })
    }
}

pub fn label_components(field: &ConductanceField) -> ClusterLabeling {
    let torus = *field.torus();
    label_with_order(field, 0..torus.n_bonds())
}

fn label_with_order(
    field: &ConductanceField,
    bonds: impl IntoIterator<Item = usize>,
) -> ClusterLabeling {
    let torus = *field.torus();
    let d = torus.dim();
    let n = torus.n_sites();
    let mut uf = UnionFind::new(n);
    let mut touched = vec![false; n];
    for bond in bonds {
        if field.weights()[bond] > 0.0 {
            let (x, axis) = (bond / d, bond % d);
            let y = torus.forward(x, axis);
            touched[x] = true;
            touched[y] = true;
            uf.union(x, y);
        }
    }

    let mut root_to_id = vec![NONE; n];
    let mut component_id = vec![NONE; n];
    let mut component_sizes = Vec::new();
    for site in 0..n {
        if !touched[site] {
            continue;
        }
        let root = uf.find(site);
        if root_to_id[root] == NONE {
            root_to_id[root] = component_sizes.len() as u32;
            component_sizes.push(0);
        }
        let id = root_to_id[root];
        component_id[site] = id;
        component_sizes[id as usize] += 1;
    }

    // max_by_key keeps the last maximum, so scan ids in reverse to keep the first
    let giant_id = (0..component_sizes.len())
        .rev()
        .max_by_key(|&id| component_sizes[id]);

    let mut giant_sites = Vec::new();
    let mut giant_index = vec![NONE; n];
    if let Some(g) = giant_id {
        for site in 0..n {
            if component_id[site] == g as u32 {
                giant_index[site] = giant_sites.len() as u32;
                giant_sites.push(site);
            }
        }
    }

    ClusterLabeling {
        torus,
        component_id,
        component_sizes,
        giant_id,
        giant_sites,
        giant_index,
    }
}

/// Undirected bond `{site, to}` with `to = site + e_axis`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bond {
    pub site: usize,
    pub axis: usize,
    pub to: usize,
    pub weight: f64,
}

/// Positive-conductance bonds with both endpoints in the giant.
pub fn giant_bonds(field: &ConductanceField, labeling: &ClusterLabeling) -> Result<Vec<Bond>> {
    check_compatible(field, labeling)?;
    let torus = field.torus();
    let mut bonds = Vec::new();
    for &x in labeling.giant_sites() {
        for axis in 0..torus.dim() {
            let w = field.weight(x, axis);
            let y = torus.forward(x, axis);
            if w > 0.0 && labeling.in_giant(y) {
                bonds.push(Bond {
                    site: x,
                    axis,
                    to: y,
                    weight: w,
                });
            }
        }
    }
    Ok(bonds)
}

pub(crate) fn check_compatible(field: &ConductanceField, labeling: &ClusterLabeling) -> Result<()> {
    if field.torus() != labeling.torus() {
        return Err(Error::DimensionMismatch {
            expected: field.torus().n_sites(),
            actual: labeling.torus().n_sites(),
        });
    }
    Ok(())
}

/// One replica row of the cluster-statistics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub seed: u64,
    #[serde(rename = "L")]
    pub side: usize,
    pub m_hat: f64,
    pub n_components: usize,
    pub giant_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MEstimate {
    pub m_hat: MeanStderr,
    pub rows: Vec<ClusterRow>,
}

/// Giant-cluster density averaged over independent replicas.
///
/// Replica `i` uses the field seed `derive_seed(seed, "replica", i)`.
pub fn estimate_m(
    law: &FieldLaw,
    dim: usize,
    side: usize,
    cap: f64,
    n_samples: usize,
    seed: u64,
) -> Result<MEstimate> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be at least 1"));
    }
    let rows = (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let s = replica_seed(seed, i);
            let field = sample_field(law, dim, side, cap, s)?;
            let lab = label_components(&field);
            Ok(ClusterRow {
                seed: s,
                side,
                m_hat: lab.m_hat(),
                n_components: lab.n_components(),
                giant_size: lab.giant_size(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = rows.iter().map(|r| r.m_hat).collect();
    Ok(MEstimate {
        m_hat: MeanStderr::of(&values),
        rows,
    })
}

pub fn replica_seed(master: u64, index: usize) -> u64 {
    derive_seed(master, "replica", index as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn constant(side: usize) -> ConductanceField {
        sample_field(&FieldLaw::Constant { c: 1.0 }, 2, side, 1.0, 0).unwrap()
    }

    fn single_bond() -> ConductanceField {
        let mut w = vec![0.0; 2 * 16];
        w[5 * 2] = 1.0; // site 5, axis 0
        ConductanceField::from_weights(2, 4, 1.0, w).unwrap()
    }

    #[test]
    fn full_lattice_is_one_component() {
        let lab = label_components(&constant(8));
        assert_eq!(lab.n_components(), 1);
        assert_eq!(lab.m_hat(), 1.0);
    }

    #[test]
    fn zero_field_has_no_giant() {
        let f = sample_field(&FieldLaw::Constant { c: 0.0 }, 2, 8, 1.0, 0).unwrap();
        let lab = label_components(&f);
        assert_eq!(lab.n_components(), 0);
        assert_eq!(lab.m_hat(), 0.0);
        assert_eq!(lab.giant_id(), None);
        assert!(lab.giant_mask().iter().all(|m| !m));
        assert!(giant_bonds(&f, &lab).unwrap().is_empty());
    }

    #[test]
    fn giant_bond_counts() {
        let f = constant(4);
        let lab = label_components(&f);
        assert_eq!(giant_bonds(&f, &lab).unwrap().len(), 32);

        let f = single_bond();
        let lab = label_components(&f);
        assert_eq!(lab.giant_sites(), &[5, 9]);
        assert_eq!(giant_bonds(&f, &lab).unwrap().len(), 1);
    }

    #[test]
    fn mismatched_labeling_rejected() {
        let lab = label_components(&constant(8));
        assert!(giant_bonds(&constant(4), &lab).is_err());
    }

    #[test]
    fn tie_break_prefers_smallest_minimal_site() {
        // two disjoint bonds: {4,5} and {0,1} along axis 1 in a 4x4 torus
        let mut w = vec![0.0; 32];
        w[4 * 2 + 1] = 1.0;
        w[1] = 1.0;
        let f = ConductanceField::from_weights(2, 4, 1.0, w).unwrap();
        let lab = label_components(&f);
        assert_eq!(lab.component_sizes(), &[2, 2]);
        assert_eq!(lab.giant_sites(), &[0, 1]);
    }

    #[test]
    fn order_independent_labels() {
        let law = FieldLaw::Bernoulli { p: 0.5, value: 1.0 };
        let f = sample_field(&law, 2, 32, 1.0, 17).unwrap();
        let base = label_components(&f);
        let mut order: Vec<usize> = (0..f.torus().n_bonds()).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            order.shuffle(&mut rng);
            assert_eq!(label_with_order(&f, order.iter().copied()), base);
        }
    }

    #[test]
    fn giant_sites_have_positive_bonds() {
        let law = FieldLaw::Bernoulli { p: 0.6, value: 1.0 };
        let f = sample_field(&law, 2, 32, 1.0, 2).unwrap();
        let lab = label_components(&f);
        let t = f.torus();
        for &x in lab.giant_sites() {
            let deg = (0..2)
                .filter(|&a| f.weight(x, a) > 0.0 || f.weight(t.backward(x, a), a) > 0.0)
                .count();
            assert!(deg > 0);
        }
    }

    #[test]
    fn estimate_m_constant_law() {
        let est = estimate_m(&FieldLaw::Constant { c: 1.0 }, 2, 8, 1.0, 4, 3).unwrap();
        assert_eq!(est.m_hat.mean, 1.0);
        assert_eq!(est.m_hat.stderr, 0.0);
        assert!(estimate_m(&FieldLaw::Constant { c: 1.0 }, 2, 8, 1.0, 0, 3).is_err());
    }
}
