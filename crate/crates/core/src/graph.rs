//! Jump table of the giant cluster: for every giant site, its positive bonds
//! to other giant sites with rates and lattice displacements.

use crate::cluster::{check_compatible, giant_bonds, ClusterLabeling};
use crate::env::ConductanceField;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    /// Compact index of the neighbor.
    pub to: u32,
    pub rate: f64,
    pub axis: u8,
    /// +1 for a step along `+e_axis`, -1 otherwise.
    pub sign: i8,
}

#[derive(Debug, Clone)]
pub struct ClusterGraph {
    dim: usize,
    offsets: Vec<usize>,
    edges: Vec<Edge>,
    total_rate: Vec<f64>,
    /// Undirected giant bonds as compact index pairs with their weights.
    bonds: Vec<(u32, u32, f64)>,
}

impl ClusterGraph {
    pub fn new(field: &ConductanceField, labeling: &ClusterLabeling) -> Result<Self> {
        check_compatible(field, labeling)?;
        let torus = field.torus();
        let n = labeling.giant_size();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut edges = Vec::new();
        let mut total_rate = Vec::with_capacity(n);
        offsets.push(0);
        for &x in labeling.giant_sites() {
            let mut lambda = 0.0;
            for axis in 0..torus.dim() {
                let fwd = torus.forward(x, axis);
                let w = field.weight(x, axis);
                if let (true, Some(j)) = (w > 0.0, labeling.giant_index(fwd)) {
                    edges.push(Edge {
                        to: j as u32,
                        rate: w,
                        axis: axis as u8,
                        sign: 1,
                    });
                    lambda += w;
                }
                let back = torus.backward(x, axis);
                let w = field.weight(back, axis);
                if let (true, Some(j)) = (w > 0.0, labeling.giant_index(back)) {
                    edges.push(Edge {
                        to: j as u32,
                        rate: w,
                        axis: axis as u8,
                        sign: -1,
                    });
                    lambda += w;
                }
            }
            total_rate.push(lambda);
            offsets.push(edges.len());
        }
        let bonds = giant_bonds(field, labeling)?
            .into_iter()
            .map(|b| {
                (
                    labeling.giant_index(b.site).unwrap() as u32,
                    labeling.giant_index(b.to).unwrap() as u32,
                    b.weight,
                )
            })
            .collect();
        Ok(ClusterGraph {
            dim: torus.dim(),
            offsets,
            edges,
            total_rate,
            bonds,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.total_rate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total_rate.is_empty()
    }

    #[inline]
    pub fn edges(&self, i: usize) -> &[Edge] {
        &self.edges[self.offsets[i]..self.offsets[i + 1]]
    }

    /// Holding rate `λ_ω(z)` at compact site `i`.
    #[inline]
    pub fn total_rate(&self, i: usize) -> f64 {
        self.total_rate[i]
    }

    pub fn max_rate(&self) -> f64 {
        self.total_rate.iter().copied().fold(0.0, f64::max)
    }

    pub fn bonds(&self) -> &[(u32, u32, f64)] {
        &self.bonds
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::label_components;
    use crate::env::{sample_field, FieldLaw};

    #[test]
    fn constant_field_degrees() {
        let f = sample_field(&FieldLaw::Constant { c: 0.5 }, 2, 4, 1.0, 0).unwrap();
        let lab = label_components(&f);
        let g = ClusterGraph::new(&f, &lab).unwrap();
        assert_eq!(g.len(), 16);
        assert_eq!(g.bonds().len(), 32);
        for i in 0..16 {
            assert_eq!(g.edges(i).len(), 4);
            assert_eq!(g.total_rate(i), 2.0);
        }
    }

    #[test]
    fn rates_are_symmetric() {
        let f = sample_field(&FieldLaw::Bernoulli { p: 0.7, value: 1.0 }, 2, 8, 1.0, 5).unwrap();
        let lab = label_components(&f);
        let g = ClusterGraph::new(&f, &lab).unwrap();
        for i in 0..g.len() {
            for e in g.edges(i) {
                let back: f64 = g
                    .edges(e.to as usize)
                    .iter()
                    .filter(|r| r.to as usize == i && r.axis == e.axis && r.sign == -e.sign)
                    .map(|r| r.rate)
                    .sum();
                assert_eq!(back, e.rate);
            }
        }
    }
}
