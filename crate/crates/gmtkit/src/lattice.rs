//! David–Mattila-style hierarchical cell decomposition for atomic measures.
//!
//! [`build_lattice`] produces a tree of nested partitions ("cells") of the
//! atom set. Level `k` works at the length scale `A0^-k * scale`, where
//! `scale` is the diameter of the support. Every cell `Q` carries a ball
//! `B(z_Q, r_Q)` centered at one of its own atoms with
//! `r_Q = C0 * A0^-k * scale`, and the construction guarantees the three
//! structural invariants everything downstream relies on:
//!
//! * same-level cells have pairwise disjoint dilated balls
//!   `B(z_Q, 5 r_Q)`,
//! * the children of a cell partition it exactly,
//! * every atom of `Q` lies within `28 r_Q` of `z_Q` (the construction
//!   actually achieves `20 r_Q`; the measured per-level maximum of
//!   `dist(atom, z_Q) / r_Q` is recorded in [`Lattice::containment_max`]).
//!
//! Construction. Centers form nested separated nets: the level-`k` net
//! contains the level-`k-1` net (previous centers are kept — they are
//! `A0` times farther apart than the new separation threshold) and is
//! extended greedily over all atoms, ranked by the mass of
//! `B(atom, A0^-k * scale)` (heaviest first, ties by lowest atom index),
//! accepting a candidate exactly when its dilated ball stays disjoint
//! from every accepted one. Each atom is then assigned to its nearest
//! center in the deepest net (ties by lowest center index), and coarser
//! memberships are obtained by following each center's link to its
//! nearest next-coarser center. Lifting the finest assignment through
//! the center tree is what makes the `28 r_Q` containment provable
//! (nearest-center assignment applied per level can strand an atom whose
//! local candidates were all claimed by neighboring cells); the triangle
//! sum over one net hop per level gives
//! `dist(atom, z_Q) <= 10 r_Q * sum_j A0^-j <= 20 r_Q` for `A0 >= 2`.
//!
//! Two practical deviations from the textbook regime, both recorded here
//! on purpose: the classical construction wants `A0 > 5000 C0`, which on
//! desk-sized inputs produces a root plus dust; we accept any `A0 >= 2`
//! (quadtree-like `A0 = 4` matches four-corner Cantor iterates exactly),
//! and the small-boundary estimate is exposed as a measured diagnostic
//! ([`Lattice::boundary_mass`]) rather than enforced.
//!
//! The construction stops refining once every cell is a singleton whose
//! ball is doubling (deeper levels would repeat the same partition with
//! smaller radii); [`Lattice::effective_depth`] records where it stopped.

use std::collections::{HashMap, VecDeque};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::measure::{pairwise_sum, Ball, BallMass, DiscreteMeasure, Point};

/// One cell of the decomposition.
#[derive(Clone, Debug, Serialize)]
pub struct Cell {
    /// Global cell id (position in [`Lattice::cells`]).
    pub id: usize,
    /// Level `k >= 0`; level 0 is the root partition (a single cell).
    pub level: usize,
    /// Atom id of the center `z_Q`.
    pub center_atom: usize,
    /// Center position (a copy of the center atom's position).
    pub z: Point,
    /// Ball radius `r_Q = C0 * A0^-level * scale`.
    pub r: f64,
    /// Atom ids of the cell, ascending.
    pub atom_ids: Vec<usize>,
    /// Parent cell id (`None` exactly at level 0).
    pub parent: Option<usize>,
    /// Child cell ids, ascending; empty at the deepest level.
    pub children: Vec<usize>,
    /// Whether `mass(B(z, 100 r)) <= C0 * mass(B(z, r))`.
    pub doubling: bool,
}

/// Measured boundary mass of a cell at one thinning step, together with
/// the reference decay bound it is compared against.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct BoundaryMass {
    /// Mass of atoms strictly within `A0^-(k+l) * scale` of the cell
    /// boundary, counted on both sides (atoms of `Q` close to the
    /// complement plus atoms of the complement close to `Q`).
    pub nl_mass: f64,
    /// `(C0^-(3 dim + 1) * A0)^-l * mass(B(z_Q, 90 r_Q))`, the shape of
    /// the small-boundary decay estimate with its leading constant set
    /// to one. Diagnostic only: nothing in the construction enforces it.
    pub bound_rhs: f64,
}

/// Hierarchical decomposition of a discrete measure's atom set.
#[derive(Clone, Debug, Serialize)]
pub struct Lattice {
    /// Scale ratio between consecutive levels.
    pub a0: f64,
    /// Radius head-room factor; cell radii are `C0 * A0^-k * scale`.
    pub c0: f64,
    /// Diameter normalization: level-`k` balls have radius
    /// `C0 * A0^-k * scale`.
    pub scale: f64,
    /// Depth asked for at build time.
    pub requested_depth: usize,
    /// Deepest level actually built (`<= requested_depth`; smaller when
    /// refinement saturated into doubling singletons early).
    pub effective_depth: usize,
    /// `levels[k]` lists the level-`k` cell ids in net acceptance order.
    pub levels: Vec<Vec<usize>>,
    /// Per-level measured maximum of `dist(atom, z_Q) / r_Q`.
    pub containment_max: Vec<f64>,
    /// All cells, indexed by id.
    pub cells: Vec<Cell>,
}

impl Lattice {
    /// Look up a cell by id.
    pub fn cell(&self, id: usize) -> Result<&Cell> {
        self.cells.get(id).ok_or(Error::UnknownCell(id))
    }

    /// The single level-0 cell.
    pub fn root(&self) -> &Cell {
        &self.cells[self.levels[0][0]]
    }

    /// Side length of level-`k` cells: `56 * C0 * A0^-k * scale`
    /// (the diameter of the dilated ball `2 B_Q`, `B_Q = B(z_Q, 28 r_Q)`).
    pub fn side_length(&self, level: usize) -> f64 {
        56.0 * self.c0 * self.a0.powi(-(level as i32)) * self.scale
    }

    /// Side length of the level the given cell lives on.
    pub fn ell(&self, id: usize) -> Result<f64> {
        Ok(self.side_length(self.cell(id)?.level))
    }

    /// Cell ids at one level, in net acceptance order.
    pub fn level_cells(&self, level: usize) -> Result<&[usize]> {
        self.levels
            .get(level)
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::Precondition(format!(
                    "level {level} exceeds effective depth {}",
                    self.effective_depth
                ))
            })
    }

    /// Stored doubling flag: `mass(B(z, 100 r)) <= C0 * mass(B(z, r))`.
    pub fn is_doubling(&self, id: usize) -> Result<bool> {
        Ok(self.cell(id)?.doubling)
    }

    /// Maximal doubling descendants: the inclusion-maximal cells `P`
    /// below `q` that are doubling and satisfy `2 B_P ⊂ 1.1 B_q`
    /// (equivalently `dist(z_P, z_q) + 56 r_P <= 30.8 r_q`). Returned
    /// ascending by id; empty when no descendant qualifies.
    pub fn maximal_doubling(&self, id: usize) -> Result<Vec<usize>> {
        let q = self.cell(id)?;
        let mut out = Vec::new();
        let mut queue: VecDeque<usize> = q.children.iter().copied().collect();
        while let Some(pid) = queue.pop_front() {
            let p = &self.cells[pid];
            let fits = p.z.dist(&q.z) + 56.0 * p.r <= 30.8 * q.r;
            if p.doubling && fits {
                out.push(pid);
            } else {
                queue.extend(p.children.iter().copied());
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Mass within `A0^-(k+l) * scale` of the cell boundary (strict
    /// inequality, both sides), plus the reference decay bound. The
    /// distance from an atom to the opposite side is the minimum over
    /// that side's atoms.
    pub fn boundary_mass(&self, m: &DiscreteMeasure, id: usize, l: u32) -> Result<BoundaryMass> {
        let cell = self.cell(id)?;
        let n = m.len();
        let h = self.a0.powi(-(cell.level as i32 + l as i32)) * self.scale;
        let mut in_q = vec![false; n];
        for &x in &cell.atom_ids {
            in_q[x] = true;
        }
        let mut hit_weights = Vec::new();
        for x in 0..n {
            let px = m.position(x);
            let mut dmin = f64::INFINITY;
            if in_q[x] {
                for y in 0..n {
                    if !in_q[y] {
                        dmin = dmin.min(px.dist(m.position(y)));
                    }
                }
            } else {
                for &y in &cell.atom_ids {
                    dmin = dmin.min(px.dist(m.position(y)));
                }
            }
            if dmin < h {
                hit_weights.push(m.weight(x));
            }
        }
        let dim = m.position(0).dim() as i32;
        let base = self.c0.powi(-(3 * dim + 1)) * self.a0;
        let rhs =
            base.powi(-(l as i32)) * m.ball_mass(&Ball::new(cell.z.clone(), 90.0 * cell.r)?);
        Ok(BoundaryMass {
            nl_mass: pairwise_sum(&hit_weights),
            bound_rhs: rhs,
        })
    }

    /// Deterministic JSON dump of the whole tree.
    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("lattice serialization cannot fail")
    }
}

/// Nearest center by distance, ties broken toward the lowest atom id.
fn nearest_center(m: &DiscreteMeasure, centers: &[usize], p: &Point) -> usize {
    let mut best_d = f64::INFINITY;
    let mut best = usize::MAX;
    for &c in centers {
        let d = m.position(c).dist(p);
        if d < best_d || (d == best_d && c < best) {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Build the cell tree for `m` with scale ratio `a0 >= 2`, radius factor
/// `c0 >= 1`, and levels `0..=depth` (fewer when refinement saturates;
/// see [`Lattice::effective_depth`]). Deterministic: identical inputs
/// and parameters give byte-identical [`Lattice::to_json_string`] output.
pub fn build_lattice(m: &DiscreteMeasure, a0: f64, c0: f64, depth: usize) -> Result<Lattice> {
    if !a0.is_finite() || a0 < 2.0 {
        return Err(Error::Precondition(format!(
            "scale ratio a0 must be finite and >= 2, got {a0}"
        )));
    }
    if !c0.is_finite() || c0 < 1.0 {
        return Err(Error::Precondition(format!(
            "radius factor c0 must be finite and >= 1, got {c0}"
        )));
    }
    if depth == 0 {
        return Err(Error::Precondition("depth must be >= 1".into()));
    }
    let n = m.len();
    let diam = m.diameter();
    let scale = if diam > 0.0 { diam } else { 1.0 };
    let r_at = |k: usize| c0 * a0.powi(-(k as i32)) * scale;

    // Nested separated nets of centers, one per level.
    let mut nets: Vec<Vec<usize>> = Vec::new();
    for k in 0..=depth {
        let r = r_at(k);
        // Same-level cells get equal radii, so disjointness of the
        // 5-dilated balls is exactly separation > 5 (r + r') = 10 r.
        let sep = 10.0 * r;
        let rank_r = a0.powi(-(k as i32)) * scale;
        let mut rank_mass = Vec::with_capacity(n);
        for i in 0..n {
            rank_mass.push(m.ball_mass(&Ball::new(m.position(i).clone(), rank_r)?));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            rank_mass[j]
                .partial_cmp(&rank_mass[i])
                .expect("ball masses are finite")
                .then_with(|| i.cmp(&j))
        });
        let mut is_center = vec![false; n];
        let mut net = Vec::new();
        if let Some(prev) = nets.last() {
            for &c in prev {
                is_center[c] = true;
                net.push(c);
            }
        }
        for &i in &order {
            if is_center[i] {
                continue;
            }
            let near = m.atoms_in_ball(&Ball::new(m.position(i).clone(), sep)?);
            if near.iter().all(|&j| !is_center[j]) {
                is_center[i] = true;
                net.push(i);
            }
        }
        let saturated = net.len() == n;
        nets.push(net);
        if saturated {
            // Once every atom is its own center and every such ball is
            // doubling, deeper levels repeat the same partition.
            let all_doubling = (0..n).all(|i| {
                let b1 = m.ball_mass(&Ball {
                    center: m.position(i).clone(),
                    radius: r,
                });
                let b100 = m.ball_mass(&Ball {
                    center: m.position(i).clone(),
                    radius: 100.0 * r,
                });
                b100 <= c0 * b1
            });
            if all_doubling {
                break;
            }
        }
    }
    let kmax = nets.len() - 1;

    // Link each center to its nearest center one level up. Centers kept
    // from the coarser net link to themselves.
    let mut parent_center: Vec<HashMap<usize, usize>> = vec![HashMap::new()];
    for k in 1..=kmax {
        let mut in_prev = vec![false; n];
        for &c in &nets[k - 1] {
            in_prev[c] = true;
        }
        let mut links = HashMap::new();
        for &c in &nets[k] {
            let up = if in_prev[c] {
                c
            } else {
                nearest_center(m, &nets[k - 1], m.position(c))
            };
            links.insert(c, up);
        }
        parent_center.push(links);
    }

    // Assign atoms at the deepest net, then lift through the center tree.
    let mut center_of = vec![vec![0usize; n]; kmax + 1];
    for x in 0..n {
        center_of[kmax][x] = nearest_center(m, &nets[kmax], m.position(x));
    }
    for k in (0..kmax).rev() {
        for x in 0..n {
            center_of[k][x] = parent_center[k + 1][&center_of[k + 1][x]];
        }
    }

    // Materialize cells level by level.
    let mut cells: Vec<Cell> = Vec::new();
    let mut levels = Vec::with_capacity(kmax + 1);
    let mut containment_max = vec![0.0f64; kmax + 1];
    let mut id_of: Vec<HashMap<usize, usize>> = Vec::with_capacity(kmax + 1);
    for k in 0..=kmax {
        let r = r_at(k);
        let mut members: HashMap<usize, Vec<usize>> = HashMap::new();
        for x in 0..n {
            members.entry(center_of[k][x]).or_default().push(x);
        }
        let mut level_ids = Vec::with_capacity(nets[k].len());
        let mut ids = HashMap::new();
        for &c in &nets[k] {
            let id = cells.len();
            let atom_ids = members
                .remove(&c)
                .expect("a net center always retains its own atom");
            let z = m.position(c).clone();
            for &x in &atom_ids {
                containment_max[k] = containment_max[k].max(z.dist(m.position(x)) / r);
            }
            let parent = if k == 0 {
                None
            } else {
                Some(id_of[k - 1][&parent_center[k][&c]])
            };
            cells.push(Cell {
                id,
                level: k,
                center_atom: c,
                z,
                r,
                atom_ids,
                parent,
                children: Vec::new(),
                doubling: false,
            });
            ids.insert(c, id);
            level_ids.push(id);
        }
        id_of.push(ids);
        levels.push(level_ids);
    }
    for id in 0..cells.len() {
        if let Some(p) = cells[id].parent {
            cells[p].children.push(id);
        }
    }
    for cell in &mut cells {
        let b1 = m.ball_mass(&Ball::new(cell.z.clone(), cell.r)?);
        let b100 = m.ball_mass(&Ball::new(cell.z.clone(), 100.0 * cell.r)?);
        cell.doubling = b100 <= c0 * b1;
    }

    Ok(Lattice {
        a0,
        c0,
        scale,
        requested_depth: depth,
        effective_depth: kmax,
        levels,
        containment_max,
        cells,
    })
}
