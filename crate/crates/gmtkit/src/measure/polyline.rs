use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{pairwise_sum, Ball, BallMass, Point};

/// Measure with piecewise-constant linear density on polygonal chains.
///
/// Ball masses are computed analytically: each segment contributes
/// density * |segment ∩ B|, and the intersection parameter interval solves a
/// quadratic, so no discretization enters.
#[derive(Clone, Debug)]
pub struct PolylineMeasure {
    dim: usize,
    chains: Vec<Chain>,
    total_mass: f64,
}

#[derive(Clone, Debug)]
pub struct Chain {
    pub vertices: Vec<Point>,
    /// One density per segment: `density.len() == vertices.len() - 1`.
    pub density: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolylineJson {
    dim: usize,
    chains: Vec<ChainJson>,
}

#[derive(Serialize, Deserialize)]
struct ChainJson {
    vertices: Vec<Vec<f64>>,
    density: Vec<f64>,
}

impl PolylineMeasure {
    pub fn new(dim: usize, chains: Vec<Chain>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidPolyline("dim must be >= 1".into()));
        }
        if chains.is_empty() {
            return Err(Error::InvalidPolyline("at least one chain required".into()));
        }
        for chain in &chains {
            if chain.vertices.len() < 2 {
                return Err(Error::InvalidPolyline("chain needs >= 2 vertices".into()));
            }
            if chain.density.len() != chain.vertices.len() - 1 {
                return Err(Error::InvalidPolyline(format!(
                    "chain with {} vertices needs {} densities, got {}",
                    chain.vertices.len(),
                    chain.vertices.len() - 1,
                    chain.density.len()
                )));
            }
            for v in &chain.vertices {
                if v.dim() != dim {
                    return Err(Error::DimMismatch {
                        expected: dim,
                        got: v.dim(),
                    });
                }
            }
            for pair in chain.vertices.windows(2) {
                if pair[0] == pair[1] {
                    return Err(Error::InvalidPolyline("consecutive vertices must be distinct".into()));
                }
            }
            if chain.density.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
                return Err(Error::InvalidPolyline("densities must be positive and finite".into()));
            }
        }
        let seg_masses: Vec<f64> = chains
            .iter()
            .flat_map(|c| {
                c.vertices
                    .windows(2)
                    .zip(&c.density)
                    .map(|(vv, d)| d * vv[0].dist(&vv[1]))
            })
            .collect();
        let total_mass = pairwise_sum(&seg_masses);
        Ok(PolylineMeasure { dim, chains, total_mass })
    }

    /// Single straight chain from `a` to `b` with constant density.
    pub fn segment(a: Point, b: Point, density: f64) -> Result<Self> {
        let dim = a.dim();
        PolylineMeasure::new(
            dim,
            vec![Chain {
                vertices: vec![a, b],
                density: vec![density],
            }],
        )
    }

    pub fn chains(&self) -> &[Chain] {
        &self.chains
    }

    /// Total length of all chains.
    pub fn length(&self) -> f64 {
        let ls: Vec<f64> = self
            .chains
            .iter()
            .flat_map(|c| c.vertices.windows(2).map(|vv| vv[0].dist(&vv[1])))
            .collect();
        pairwise_sum(&ls)
    }

    /// Atom sampling with the given spacing: atoms at segment-arclength steps,
    /// weight = density * local step. Test oracle for analytic ball masses.
    pub fn sample_atoms(&self, spacing: f64) -> Vec<(Point, f64)> {
        let mut out = Vec::new();
        for chain in &self.chains {
            for (vv, d) in chain.vertices.windows(2).zip(&chain.density) {
                let len = vv[0].dist(&vv[1]);
                let n = (len / spacing).ceil().max(1.0) as usize;
                let step = len / n as f64;
                for i in 0..n {
                    let t = (i as f64 + 0.5) / n as f64;
                    out.push((vv[0].lerp(&vv[1], t), d * step));
                }
            }
        }
        out
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: PolylineJson = serde_json::from_str(s)?;
        let chains = raw
            .chains
            .into_iter()
            .map(|c| Chain {
                vertices: c.vertices.into_iter().map(|coords| Point { coords }).collect(),
                density: c.density,
            })
            .collect();
        PolylineMeasure::new(raw.dim, chains)
    }

    pub fn to_json_string(&self) -> String {
        let raw = PolylineJson {
            dim: self.dim,
            chains: self
                .chains
                .iter()
                .map(|c| ChainJson {
                    vertices: c.vertices.iter().map(|p| p.coords.clone()).collect(),
                    density: c.density.clone(),
                })
                .collect(),
        };
        serde_json::to_string(&raw).expect("polyline serialization cannot fail")
    }
}

/// Length of the parameter interval where |a + t(b-a) - c| <= r, times |b-a|.
fn segment_ball_length(a: &Point, b: &Point, center: &Point, r: f64) -> f64 {
    let d = b.sub(a);
    let e = a.sub(center);
    let qa: f64 = d.iter().map(|x| x * x).sum();
    let qb: f64 = 2.0 * d.iter().zip(&e).map(|(x, y)| x * y).sum::<f64>();
    let qc: f64 = e.iter().map(|x| x * x).sum::<f64>() - r * r;
    let disc = qb * qb - 4.0 * qa * qc;
    if disc <= 0.0 {
        return 0.0;
    }
    let sq = disc.sqrt();
    let t1 = ((-qb - sq) / (2.0 * qa)).max(0.0);
    let t2 = ((-qb + sq) / (2.0 * qa)).min(1.0);
    if t2 <= t1 {
        0.0
    } else {
        (t2 - t1) * qa.sqrt()
    }
}

impl BallMass for PolylineMeasure {
    fn ball_mass(&self, b: &Ball) -> f64 {
        let parts: Vec<f64> = self
            .chains
            .iter()
            .flat_map(|c| {
                c.vertices.windows(2).zip(&c.density).map(|(vv, d)| {
                    d * segment_ball_length(&vv[0], &vv[1], &b.center, b.radius)
                })
            })
            .collect();
        pairwise_sum(&parts)
    }

    fn total_mass(&self) -> f64 {
        self.total_mass
    }

    fn dim(&self) -> usize {
        self.dim
    }
}
