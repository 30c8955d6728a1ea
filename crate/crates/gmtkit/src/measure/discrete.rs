use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{pairwise_sum, Ball, BallMass, Point};

/// Finite weighted atom cloud with an exact spatial index.
///
/// Atoms are immutable after construction. Coincident atoms are merged at
/// construction (weights summed, first position kept) so no two atoms share
/// a position. All mass totals use fixed-order pairwise summation.
#[derive(Clone, Debug)]
pub struct DiscreteMeasure {
    dim: usize,
    positions: Vec<Point>,
    weights: Vec<f64>,
    total_mass: f64,
    index: GridIndex,
}

#[derive(Serialize, Deserialize)]
struct MeasureJson {
    dim: usize,
    atoms: Vec<AtomJson>,
}

#[derive(Serialize, Deserialize)]
struct AtomJson {
    x: Vec<f64>,
    w: f64,
}

impl DiscreteMeasure {
    pub fn new(dim: usize, atoms: Vec<(Point, f64)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMeasure("dim must be >= 1".into()));
        }
        if atoms.is_empty() {
            return Err(Error::InvalidMeasure("measure needs at least one atom".into()));
        }
        for (p, w) in &atoms {
            if p.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    got: p.dim(),
                });
            }
            if p.coords.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidMeasure(format!("nonfinite coordinate in {p:?}")));
            }
            if !(*w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidMeasure(format!(
                    "weights must be positive and finite, got {w}"
                )));
            }
        }
        // Merge coincident atoms: exact coordinate equality, first occurrence wins.
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut positions: Vec<Point> = Vec::with_capacity(atoms.len());
        let mut weights: Vec<f64> = Vec::with_capacity(atoms.len());
        for (p, w) in atoms {
            let key: Vec<u64> = p.coords.iter().map(|c| c.to_bits()).collect();
            match seen.get(&key) {
                Some(&i) => weights[i] += w,
                None => {
                    seen.insert(key, positions.len());
                    positions.push(p);
                    weights.push(w);
                }
            }
        }
        let total_mass = pairwise_sum(&weights);
        let index = GridIndex::build(&positions);
        Ok(DiscreteMeasure {
            dim,
            positions,
            weights,
            total_mass,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, i: usize) -> &Point {
        &self.positions[i]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn positions(&self) -> &[Point] {
        &self.positions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Diameter of the support (max pairwise atom distance; 0 for a single atom).
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for i in 0..self.positions.len() {
            for j in (i + 1)..self.positions.len() {
                let d = self.positions[i].dist_sq(&self.positions[j]);
                if d > best {
                    best = d;
                }
            }
        }
        best.sqrt()
    }

    /// The atom pair realizing the diameter (ties: lexicographically smallest
    /// index pair). Errors when fewer than two atoms exist.
    pub fn diameter_pair(&self) -> Result<(usize, usize)> {
        if self.len() < 2 {
            return Err(Error::Precondition("diameter pair needs >= 2 atoms".into()));
        }
        let (mut bi, mut bj, mut best) = (0usize, 1usize, -1.0f64);
        for i in 0..self.positions.len() {
            for j in (i + 1)..self.positions.len() {
                let d = self.positions[i].dist_sq(&self.positions[j]);
                if d > best {
                    best = d;
                    bi = i;
                    bj = j;
                }
            }
        }
        Ok((bi, bj))
    }

    /// Ids of atoms in the closed ball, ascending.
    pub fn atoms_in_ball(&self, b: &Ball) -> Vec<usize> {
        let mut ids = self.index.candidates_in_box(&b.center, b.radius);
        ids.retain(|&i| self.positions[i].dist(&b.center) <= b.radius);
        ids.sort_unstable();
        ids
    }

    /// Mass of atoms in the closed ball restricted to a sorted id subset.
    pub fn ball_mass_restricted(&self, b: &Ball, subset: &[usize]) -> f64 {
        let ws: Vec<f64> = subset
            .iter()
            .copied()
            .filter(|&i| self.positions[i].dist(&b.center) <= b.radius)
            .map(|i| self.weights[i])
            .collect();
        pairwise_sum(&ws)
    }

    /// Brute-force ball mass, bypassing the index. Test oracle.
    pub fn ball_mass_brute(&self, b: &Ball) -> f64 {
        let ws: Vec<f64> = self
            .positions
            .iter()
            .zip(&self.weights)
            .filter(|(p, _)| p.dist(&b.center) <= b.radius)
            .map(|(_, w)| *w)
            .collect();
        pairwise_sum(&ws)
    }

    /// (distance to x, atom id) for every atom, sorted ascending by distance
    /// then id. The event-radius backbone of all exact scale integrals.
    pub fn sorted_distances(&self, x: &Point) -> Vec<(f64, usize)> {
        let mut out: Vec<(f64, usize)> = self
            .positions
            .iter()
            .enumerate()
            .map(|(i, p)| (p.dist(x), i))
            .collect();
        out.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        out
    }

    /// Nearest atom to x (ties: lowest id), optionally excluding one id.
    pub fn nearest_atom(&self, x: &Point, exclude: Option<usize>) -> Option<(usize, f64)> {
        self.index.nearest(&self.positions, x, exclude)
    }

    /// Restriction to a sorted list of atom ids, as a new measure.
    pub fn restrict(&self, ids: &[usize]) -> Result<DiscreteMeasure> {
        let atoms: Vec<(Point, f64)> = ids
            .iter()
            .map(|&i| (self.positions[i].clone(), self.weights[i]))
            .collect();
        DiscreteMeasure::new(self.dim, atoms)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: MeasureJson = serde_json::from_str(s)?;
        let atoms = raw
            .atoms
            .into_iter()
            .map(|a| (Point { coords: a.x }, a.w))
            .collect();
        DiscreteMeasure::new(raw.dim, atoms)
    }

    pub fn to_json_string(&self) -> String {
        let raw = MeasureJson {
            dim: self.dim,
            atoms: self
                .positions
                .iter()
                .zip(&self.weights)
                .map(|(p, w)| AtomJson {
                    x: p.coords.clone(),
                    w: *w,
                })
                .collect(),
        };
        serde_json::to_string(&raw).expect("measure serialization cannot fail")
    }
}

impl BallMass for DiscreteMeasure {
    fn ball_mass(&self, b: &Ball) -> f64 {
        let ids = self.atoms_in_ball(b);
        let ws: Vec<f64> = ids.iter().map(|&i| self.weights[i]).collect();
        pairwise_sum(&ws)
    }

    fn total_mass(&self) -> f64 {
        self.total_mass
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// Uniform-grid spatial index. Cell size is the median nearest-neighbor
/// distance, which keeps per-cell occupancy near constant on the measures
/// this crate targets. Queries return exactly the ids a brute scan returns.
#[derive(Clone, Debug)]
struct GridIndex {
    cell: f64,
    origin: Vec<f64>,
    cells: HashMap<Vec<i64>, Vec<usize>>,
    lo: Vec<i64>,
    hi: Vec<i64>,
}

impl GridIndex {
    fn build(positions: &[Point]) -> GridIndex {
        let dim = positions[0].dim();
        let origin: Vec<f64> = (0..dim)
            .map(|k| {
                positions
                    .iter()
                    .map(|p| p.coords[k])
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let cell = median_nn_distance(positions).max(1e-300);
        let mut idx = GridIndex {
            cell,
            origin,
            cells: HashMap::new(),
            lo: vec![i64::MAX; dim],
            hi: vec![i64::MIN; dim],
        };
        for (i, p) in positions.iter().enumerate() {
            let key = idx.key_of(p);
            for k in 0..dim {
                idx.lo[k] = idx.lo[k].min(key[k]);
                idx.hi[k] = idx.hi[k].max(key[k]);
            }
            idx.cells.entry(key).or_default().push(i);
        }
        idx
    }

    fn key_of(&self, p: &Point) -> Vec<i64> {
        p.coords
            .iter()
            .zip(&self.origin)
            .map(|(c, o)| ((c - o) / self.cell).floor() as i64)
            .collect()
    }

    /// Ids of atoms in cells meeting the axis box [center - r, center + r]^d,
    /// unsorted, without distance filtering. Supersets the closed ball.
    fn candidates_in_box(&self, center: &Point, r: f64) -> Vec<usize> {
        let dim = center.dim();
        let lo: Vec<i64> = (0..dim)
            .map(|k| (((center.coords[k] - r - self.origin[k]) / self.cell).floor() as i64).max(self.lo[k]))
            .collect();
        let hi: Vec<i64> = (0..dim)
            .map(|k| (((center.coords[k] + r - self.origin[k]) / self.cell).floor() as i64).min(self.hi[k]))
            .collect();
        if lo.iter().zip(&hi).any(|(a, b)| a > b) {
            return Vec::new();
        }
        let volume: f64 = lo
            .iter()
            .zip(&hi)
            .map(|(a, b)| (b - a + 1) as f64)
            .product();
        let mut out = Vec::new();
        if volume > self.cells.len() as f64 {
            // The box spans more cells than exist: scan occupied cells instead.
            for (key, ids) in &self.cells {
                if key.iter().zip(lo.iter().zip(&hi)).all(|(k, (a, b))| k >= a && k <= b) {
                    out.extend_from_slice(ids);
                }
            }
        } else {
            let mut key = lo.clone();
            loop {
                if let Some(ids) = self.cells.get(&key) {
                    out.extend_from_slice(ids);
                }
                // Odometer increment over the box.
                let mut k = 0;
                loop {
                    if k == dim {
                        return out;
                    }
                    key[k] += 1;
                    if key[k] <= hi[k] {
                        break;
                    }
                    key[k] = lo[k];
                    k += 1;
                }
            }
        }
        out
    }

    fn nearest(&self, positions: &[Point], x: &Point, exclude: Option<usize>) -> Option<(usize, f64)> {
        let mut radius = self.cell;
        let span: f64 = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| ((b - a + 1) as f64) * self.cell)
            .fold(0.0, |acc, s| acc + s * s);
        let max_radius = span.sqrt() + self.cell + x.coords.iter().map(|c| c.abs()).sum::<f64>();
        loop {
            let mut ids = self.candidates_in_box(x, radius);
            ids.sort_unstable();
            let mut best: Option<(usize, f64)> = None;
            for i in ids {
                if Some(i) == exclude {
                    continue;
                }
                let d = positions[i].dist(x);
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((i, d));
                }
            }
            if let Some((i, d)) = best {
                if d <= radius {
                    return Some((i, d));
                }
            }
            if radius > max_radius {
                // Exhaustive fallback: the box already covered every cell.
                return best;
            }
            radius *= 2.0;
        }
    }
}

/// Median nearest-neighbor distance; the grid's cell size. Zero distances
/// cannot occur (coincident atoms are merged). Single atom: 1.
fn median_nn_distance(positions: &[Point]) -> f64 {
    let n = positions.len();
    if n < 2 {
        return 1.0;
    }
    let mut nns: Vec<f64>;
    if n <= 2048 {
        nns = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| positions[i].dist_sq(&positions[j]))
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect();
    } else {
        // Bootstrap with a coarse grid so nearest-neighbor search stays local.
        let dim = positions[0].dim();
        let mut span = 0.0f64;
        for k in 0..dim {
            let lo = positions.iter().map(|p| p.coords[k]).fold(f64::INFINITY, f64::min);
            let hi = positions.iter().map(|p| p.coords[k]).fold(f64::NEG_INFINITY, f64::max);
            span = span.max(hi - lo);
        }
        let cell = (span / (n as f64).powf(1.0 / dim as f64)).max(1e-300);
        let mut boot = GridIndex {
            cell,
            origin: (0..dim)
                .map(|k| positions.iter().map(|p| p.coords[k]).fold(f64::INFINITY, f64::min))
                .collect(),
            cells: HashMap::new(),
            lo: vec![i64::MAX; dim],
            hi: vec![i64::MIN; dim],
        };
        for (i, p) in positions.iter().enumerate() {
            let key = boot.key_of(p);
            for k in 0..dim {
                boot.lo[k] = boot.lo[k].min(key[k]);
                boot.hi[k] = boot.hi[k].max(key[k]);
            }
            boot.cells.entry(key).or_default().push(i);
        }
        nns = (0..n)
            .map(|i| {
                boot.nearest(positions, &positions[i], Some(i))
                    .map(|(_, d)| d)
                    .unwrap_or(1.0)
            })
            .collect();
    }
    nns.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = nns.len() / 2;
    if nns.len() % 2 == 1 {
        nns[mid]
    } else {
        0.5 * (nns[mid - 1] + nns[mid])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::theta;

    fn line_atoms(n: usize) -> Vec<(Point, f64)> {
        (0..n).map(|i| (Point::xy(i as f64, 0.0), 1.0)).collect()
    }

    #[test]
    fn ball_mass_one_dimensional_examples() {
        let m = DiscreteMeasure::new(
            1,
            vec![
                (Point { coords: vec![0.0] }, 1.0),
                (Point { coords: vec![3.0] }, 1.0),
            ],
        )
        .unwrap();
        let b1 = Ball::new(Point { coords: vec![0.0] }, 1.0).unwrap();
        assert_eq!(m.ball_mass(&b1), 1.0);
        // Closed ball: the atom on the boundary counts.
        let b3 = Ball::new(Point { coords: vec![0.0] }, 3.0).unwrap();
        assert_eq!(m.ball_mass(&b3), 2.0);
    }

    #[test]
    fn ball_mass_cantor_corner() {
        // Four atoms, weight 1/4 each, at the corners of the unit square's
        // generation-1 corner squares: (+-3/8, +-3/8) around the center.
        let c = 0.5;
        let m = DiscreteMeasure::new(
            2,
            [(-0.375, -0.375), (0.375, -0.375), (-0.375, 0.375), (0.375, 0.375)]
                .iter()
                .map(|&(x, y)| (Point::xy(c + x, c + y), 0.25))
                .collect(),
        )
        .unwrap();
        let b = Ball::new(Point::xy(0.125, 0.125), 0.3).unwrap();
        assert_eq!(m.ball_mass(&b), 0.25);
    }

    #[test]
    fn theta_single_atom() {
        let m = DiscreteMeasure::new(2, vec![(Point::xy(0.0, 0.0), 0.7)]).unwrap();
        for r in [0.1, 1.0, 12.5] {
            let b = Ball::new(Point::xy(0.0, 0.0), r).unwrap();
            assert_eq!(theta(&m, &b), 0.7 / r);
        }
    }

    #[test]
    fn theta_scales_homogeneously() {
        let m = DiscreteMeasure::new(2, line_atoms(20)).unwrap();
        let (lambda, s) = (3.5, 0.25);
        let scaled = DiscreteMeasure::new(
            2,
            m.positions()
                .iter()
                .zip(m.weights())
                .map(|(p, w)| {
                    (
                        Point {
                            coords: p.coords.iter().map(|c| c * lambda).collect(),
                        },
                        w * s,
                    )
                })
                .collect(),
        )
        .unwrap();
        let b = Ball::new(Point::xy(9.0, 0.0), 4.0).unwrap();
        let bs = Ball::new(Point::xy(9.0 * lambda, 0.0), 4.0 * lambda).unwrap();
        let ratio = theta(&scaled, &bs) / theta(&m, &b);
        assert!((ratio - s / lambda).abs() < 1e-12 * (s / lambda));
    }

    #[test]
    fn index_matches_brute_scan_exactly() {
        let mut state = 0x243f6a8885a308d3u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let atoms: Vec<(Point, f64)> = (0..500)
            .map(|_| (Point::xy(next() * 10.0, next() * 10.0), next() + 0.01))
            .collect();
        let m = DiscreteMeasure::new(2, atoms).unwrap();
        for _ in 0..10_000 {
            let b = Ball::new(
                Point::xy(next() * 12.0 - 1.0, next() * 12.0 - 1.0),
                next() * 6.0 + 1e-6,
            )
            .unwrap();
            assert_eq!(m.ball_mass(&b), m.ball_mass_brute(&b), "index/brute mismatch at {b:?}");
        }
    }

    #[test]
    fn ball_mass_monotone_in_radius() {
        let m = DiscreteMeasure::new(2, line_atoms(50)).unwrap();
        let x = Point::xy(25.3, 0.2);
        let mut last = 0.0;
        for i in 1..200 {
            let b = Ball::new(x.clone(), i as f64 * 0.37).unwrap();
            let mass = m.ball_mass(&b);
            assert!(mass >= last);
            last = mass;
        }
    }

    #[test]
    fn isometry_invariance() {
        let atoms = line_atoms(40);
        let m = DiscreteMeasure::new(2, atoms.clone()).unwrap();
        let (c, s) = (0.6f64.cos(), 0.6f64.sin());
        let rot = |p: &Point| Point::xy(c * p.coords[0] - s * p.coords[1] + 5.0, s * p.coords[0] + c * p.coords[1] - 2.0);
        let mr = DiscreteMeasure::new(2, atoms.iter().map(|(p, w)| (rot(p), *w)).collect()).unwrap();
        for (cx, r) in [(3.0, 2.0), (20.0, 7.5), (39.0, 0.9)] {
            let x = Point::xy(cx, 0.1);
            let b = Ball::new(x.clone(), r).unwrap();
            let br = Ball::new(rot(&x), r).unwrap();
            assert!((m.ball_mass(&b) - mr.ball_mass(&br)).abs() <= 1e-12 * m.total_mass());
        }
    }

    #[test]
    fn coincident_atoms_merge() {
        let m = DiscreteMeasure::new(
            2,
            vec![
                (Point::xy(1.0, 1.0), 0.5),
                (Point::xy(2.0, 1.0), 0.25),
                (Point::xy(1.0, 1.0), 0.5),
            ],
        )
        .unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.weight(0), 1.0);
        assert_eq!(m.total_mass(), 1.25);
    }

    #[test]
    fn json_round_trip_bit_exact() {
        let m = DiscreteMeasure::new(
            2,
            vec![
                (Point::xy(0.1, 0.2), 0.3),
                (Point::xy(1.0 / 3.0, 2.0f64.sqrt()), 1e-17 + 0.25),
            ],
        )
        .unwrap();
        let s = m.to_json_string();
        let m2 = DiscreteMeasure::from_json_str(&s).unwrap();
        assert_eq!(s, m2.to_json_string());
        assert_eq!(m.positions(), m2.positions());
        assert_eq!(m.weights(), m2.weights());
    }

    #[test]
    fn json_schema_shape() {
        let m = DiscreteMeasure::new(1, vec![(Point { coords: vec![0.5] }, 2.0)]).unwrap();
        assert_eq!(m.to_json_string(), r#"{"dim":1,"atoms":[{"x":[0.5],"w":2.0}]}"#);
    }

    #[test]
    fn zero_weight_rejected() {
        assert!(DiscreteMeasure::new(2, vec![(Point::xy(0.0, 0.0), 0.0)]).is_err());
        assert!(DiscreteMeasure::new(2, vec![(Point::xy(0.0, 0.0), -1.0)]).is_err());
    }

    #[test]
    fn nearest_atom_ties_take_lowest_id() {
        let m = DiscreteMeasure::new(
            2,
            vec![
                (Point::xy(1.0, 0.0), 1.0),
                (Point::xy(-1.0, 0.0), 1.0),
                (Point::xy(0.0, 5.0), 1.0),
            ],
        )
        .unwrap();
        let (id, d) = m.nearest_atom(&Point::xy(0.0, 0.0), None).unwrap();
        assert_eq!(id, 0);
        assert_eq!(d, 1.0);
        let (id2, _) = m.nearest_atom(&Point::xy(1.0, 0.0), Some(0)).unwrap();
        assert_ne!(id2, 0);
    }

    #[test]
    fn diameter_pair_realizes_diameter() {
        let m = DiscreteMeasure::new(2, line_atoms(17)).unwrap();
        let (i, j) = m.diameter_pair().unwrap();
        assert_eq!(m.position(i).dist(m.position(j)), m.diameter());
        assert_eq!((i, j), (0, 16));
    }
}
