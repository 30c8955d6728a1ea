//! Flatness coefficients: β₁, β∞, their bilateral variants, and the
//! transport-based α coefficient with its minimizing flat measure.
//!
//! β numbers measure how far the in-ball atoms sit from the best line
//! (unilateral) and how far the chord sits from the support (bilateral).
//! α measures the bounded-Lipschitz transport distance between μ and the
//! best measure of the form c·H¹ on a line, normalized by r(B)·μ(B).
//!
//! The line search is a documented heuristic: PCA axis, all two-atom lines
//! through extremal atoms, and local rotation refinement. Every returned
//! value is the *objective at the best line found*; optimality is certified
//! only against random-search oracles in the tests.

use crate::error::{Error, Result};
use crate::measure::{pairwise_sum, Ball, BallMass, DiscreteMeasure, Point};
use rayon::prelude::*;

/// Line in ℝ^d through `base` with unit `direction`.
#[derive(Clone, Debug)]
pub struct Line {
    base: Point,
    direction: Vec<f64>,
}

impl Line {
    /// Normalizes the direction; rejects zero or non-finite input.
    pub fn new(base: Point, direction: Vec<f64>) -> Result<Line> {
        if direction.len() != base.dim() {
            return Err(Error::DimMismatch {
                expected: base.dim(),
                got: direction.len(),
            });
        }
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegenerateGeometry(
                "line direction must be nonzero and finite".into(),
            ));
        }
        let mut dir: Vec<f64> = direction.iter().map(|v| v / norm).collect();
        // Canonical sign: first coordinate of visible magnitude positive.
        if let Some(lead) = dir.iter().find(|v| v.abs() > 1e-12) {
            if *lead < 0.0 {
                for v in &mut dir {
                    *v = -*v;
                }
            }
        }
        Ok(Line {
            base,
            direction: dir,
        })
    }

    pub fn through(a: &Point, b: &Point) -> Result<Line> {
        Line::new(a.clone(), b.sub(a))
    }

    pub fn base(&self) -> &Point {
        &self.base
    }

    pub fn direction(&self) -> &[f64] {
        &self.direction
    }

    /// Parameter of the orthogonal projection of `y`.
    pub fn project_param(&self, y: &Point) -> f64 {
        y.sub(&self.base)
            .iter()
            .zip(&self.direction)
            .map(|(u, v)| u * v)
            .sum()
    }

    pub fn point_at(&self, t: f64) -> Point {
        Point {
            coords: self
                .base
                .coords
                .iter()
                .zip(&self.direction)
                .map(|(b, d)| b + t * d)
                .collect(),
        }
    }

    /// Euclidean distance from `y` to the line.
    pub fn dist(&self, y: &Point) -> f64 {
        let rel = y.sub(&self.base);
        let t: f64 = rel.iter().zip(&self.direction).map(|(u, v)| u * v).sum();
        rel.iter()
            .zip(&self.direction)
            .map(|(u, v)| {
                let w = u - t * v;
                w * w
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Parameter interval of the intersection with the closed ball, if the
    /// chord is nondegenerate.
    pub fn ball_chord(&self, b: &Ball) -> Option<(f64, f64)> {
        let rel = self.base.sub(&b.center);
        let s: f64 = rel.iter().zip(&self.direction).map(|(u, v)| u * v).sum();
        let q = rel.iter().map(|v| v * v).sum::<f64>() - b.radius * b.radius;
        let disc = s * s - q;
        if disc <= 0.0 {
            return None;
        }
        let root = disc.sqrt();
        Some((-s - root, -s + root))
    }
}

/// `c · H¹` restricted to a line, the competitor class for α.
#[derive(Clone, Debug)]
pub struct FlatCandidate {
    pub line: Line,
    pub c: f64,
}

/// α value with the achieving candidate and its raw transport cost.
#[derive(Clone, Debug)]
pub struct AlphaResult {
    pub alpha: f64,
    pub minimizer: FlatCandidate,
    pub transport_cost: f64,
}

/// Objective for [`best_line`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LineObjective {
    Beta1,
    BetaInf,
}

/// Which flatness coefficient [`beta`] evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BetaKind {
    B1,
    BInf,
    BB1,
    BBInf,
}

const CHORD_SAMPLES: usize = 512;
const FLAT_ATOMS: usize = 256;

/// In-ball data shared by all flatness searches.
struct BallView<'a> {
    m: &'a DiscreteMeasure,
    b: &'a Ball,
    ids: Vec<usize>,
    mass: f64,
}

impl<'a> BallView<'a> {
    fn new(m: &'a DiscreteMeasure, b: &'a Ball) -> Result<BallView<'a>> {
        let ids = m.atoms_in_ball(b);
        if ids.is_empty() {
            return Err(Error::empty_ball(b));
        }
        let mass = pairwise_sum(&ids.iter().map(|&i| m.weight(i)).collect::<Vec<_>>());
        Ok(BallView { m, b, ids, mass })
    }

    fn weighted_centroid(&self) -> Point {
        let d = self.m.dim();
        let mut acc = vec![0.0; d];
        for &i in &self.ids {
            let w = self.m.weight(i);
            for (a, c) in acc.iter_mut().zip(&self.m.position(i).coords) {
                *a += w * c;
            }
        }
        for a in &mut acc {
            *a /= self.mass;
        }
        Point { coords: acc }
    }

    /// Weighted covariance of the in-ball atoms about their centroid.
    fn covariance(&self, centroid: &Point) -> Vec<Vec<f64>> {
        let d = self.m.dim();
        let mut cov = vec![vec![0.0; d]; d];
        for &i in &self.ids {
            let w = self.m.weight(i);
            let rel = self.m.position(i).sub(centroid);
            for p in 0..d {
                for q in p..d {
                    cov[p][q] += w * rel[p] * rel[q];
                }
            }
        }
        for p in 0..d {
            for q in 0..p {
                cov[p][q] = cov[q][p];
            }
        }
        cov
    }

    /// Unilateral terms of the β objectives for one line.
    fn unilateral(&self, line: &Line) -> (f64, f64) {
        let r = self.b.radius;
        let mut sup = 0.0f64;
        let terms: Vec<f64> = self
            .ids
            .iter()
            .map(|&i| {
                let dist = line.dist(self.m.position(i));
                sup = sup.max(dist);
                self.m.weight(i) * dist
            })
            .collect();
        let avg = pairwise_sum(&terms) / (self.mass * r);
        (avg, sup / r)
    }

    /// Chord-to-support terms of the bilateral β objectives: the H¹
    /// integral (midpoint rule on `CHORD_SAMPLES` equal pieces) and the
    /// sampled supremum of dist(·, supp μ)/r over the chord.
    fn chord_terms(&self, line: &Line) -> (f64, f64) {
        let r = self.b.radius;
        let Some((t0, t1)) = line.ball_chord(self.b) else {
            return (0.0, 0.0);
        };
        let len = t1 - t0;
        let step = len / CHORD_SAMPLES as f64;
        let dists: Vec<f64> = (0..CHORD_SAMPLES)
            .into_par_iter()
            .map(|k| {
                let x = line.point_at(t0 + (k as f64 + 0.5) * step);
                self.m.nearest_atom(&x, None).map_or(0.0, |(_, d)| d)
            })
            .collect();
        let sup = dists.iter().cloned().fold(0.0f64, f64::max);
        (pairwise_sum(&dists) * step / (r * r), sup / r)
    }

    fn score(&self, line: &Line, kind: BetaKind) -> f64 {
        let (avg, sup) = self.unilateral(line);
        match kind {
            BetaKind::B1 => avg,
            BetaKind::BInf => sup,
            BetaKind::BB1 => avg + self.chord_terms(line).0,
            BetaKind::BBInf => sup + self.chord_terms(line).1,
        }
    }
}

/// Jacobi eigendecomposition of a small symmetric matrix; returns
/// eigenvectors as rows, sorted by descending eigenvalue.
fn symmetric_eigen(mut a: Vec<Vec<f64>>) -> Vec<(f64, Vec<f64>)> {
    let d = a.len();
    let mut v = vec![vec![0.0; d]; d];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..64 {
        let mut off = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                off += a[p][q] * a[p][q];
            }
        }
        if off <= 1e-28 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                if a[p][q].abs() <= 1e-300 {
                    continue;
                }
                let theta = 0.5 * (a[q][q] - a[p][p]) / a[p][q];
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut out: Vec<(f64, Vec<f64>)> = (0..d)
        .map(|j| (a[j][j], v.iter().map(|row| row[j]).collect()))
        .collect();
    out.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap());
    out
}

/// Lower weighted median of (value, weight) pairs.
fn weighted_median(mut pairs: Vec<(f64, f64)>) -> f64 {
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let mut acc = 0.0;
    for (v, w) in &pairs {
        acc += w;
        if acc >= 0.5 * total {
            return *v;
        }
    }
    pairs.last().map_or(0.0, |p| p.0)
}

/// Golden-section minimization over `[a, b]`; returns the best sampled
/// argument (including endpoints).
fn golden_min(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, iters: usize) -> (f64, f64) {
    let inv_phi = 0.618_033_988_749_894_9;
    let (mut lo, mut hi) = (a, b);
    let mut best = (a, f(a));
    let fb = f(b);
    if fb < best.1 {
        best = (b, fb);
    }
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 < best.1 {
            best = (x1, f1);
        }
        if f2 < best.1 {
            best = (x2, f2);
        }
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 < best.1 {
        best = (x1, f1);
    }
    if f2 < best.1 {
        best = (x2, f2);
    }
    best
}

/// Candidate lines: PCA axis through the weighted centroid plus all
/// two-atom lines among the extremal atoms (maximal projection along 12
/// directions spread over the full turn of the principal plane).
fn base_candidates(view: &BallView) -> Vec<Line> {
    let d = view.m.dim();
    let centroid = view.weighted_centroid();
    let eigen = symmetric_eigen(view.covariance(&centroid));
    let mut lines = Vec::new();
    if eigen[0].0 > 1e-300 {
        if let Ok(l) = Line::new(centroid.clone(), eigen[0].1.clone()) {
            lines.push(l);
        }
    }
    // Principal plane: top eigenvector and the runner-up (or any
    // perpendicular axis in degenerate cases).
    let v1 = eigen[0].1.clone();
    let v2 = if d >= 2 {
        eigen[1].1.clone()
    } else {
        vec![0.0; d]
    };
    let mut extremal: Vec<usize> = Vec::new();
    if d >= 2 {
        for k in 0..12 {
            let ang = k as f64 * std::f64::consts::PI / 6.0;
            let (ca, sa) = (ang.cos(), ang.sin());
            let mut best: Option<(f64, usize)> = None;
            for &i in &view.ids {
                let y = view.m.position(i);
                let proj = y
                    .coords
                    .iter()
                    .zip(v1.iter().zip(&v2))
                    .map(|(c, (a, b))| c * (ca * a + sa * b))
                    .sum::<f64>();
                if best.is_none_or(|(bp, _)| proj > bp) {
                    best = Some((proj, i));
                }
            }
            if let Some((_, i)) = best {
                if !extremal.contains(&i) {
                    extremal.push(i);
                }
            }
        }
    }
    for (a, &i) in extremal.iter().enumerate() {
        for &j in extremal.iter().skip(a + 1) {
            if let Ok(l) = Line::through(view.m.position(i), view.m.position(j)) {
                lines.push(l);
            }
        }
    }
    if lines.is_empty() {
        // Single atom (or fully coincident): any line through it scores 0.
        let mut dir = vec![0.0; d];
        dir[0] = 1.0;
        lines.push(Line::new(view.m.position(view.ids[0]).clone(), dir).unwrap());
    }
    lines
}

/// 2-d line from angle and signed offset along the normal.
fn line_from_angle(theta: f64, offset: f64) -> Line {
    let n = [-theta.sin(), theta.cos()];
    Line::new(
        Point::xy(offset * n[0], offset * n[1]),
        vec![theta.cos(), theta.sin()],
    )
    .unwrap()
}

/// For a fixed 2-d direction, the exactly optimal offset of the unilateral
/// term: weighted median of the normal projections for the L¹ objectives,
/// midrange for the sup objectives.
fn optimal_offset_line(view: &BallView, theta: f64, kind: BetaKind) -> Line {
    let n = [-theta.sin(), theta.cos()];
    let projs: Vec<(f64, f64)> = view
        .ids
        .iter()
        .map(|&i| {
            let y = view.m.position(i);
            (y.coords[0] * n[0] + y.coords[1] * n[1], view.m.weight(i))
        })
        .collect();
    let offset = match kind {
        BetaKind::B1 | BetaKind::BB1 => weighted_median(projs),
        BetaKind::BInf | BetaKind::BBInf => {
            let lo = projs.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let hi = projs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            0.5 * (lo + hi)
        }
    };
    line_from_angle(theta, offset)
}

/// Rotation refinement around a starting line, scored on `kind`.
/// In d = 2 the offset is re-optimized exactly per angle; in higher
/// dimensions the direction is rotated within coordinate planes about the
/// weighted centroid.
fn refine_line(view: &BallView, start: &Line, kind: BetaKind) -> Line {
    let spread = std::f64::consts::PI / 12.0;
    if view.m.dim() == 2 {
        let theta0 = start.direction()[1].atan2(start.direction()[0]);
        let (theta, _) = golden_min(
            |t| view.score(&optimal_offset_line(view, t, kind), kind),
            theta0 - spread,
            theta0 + spread,
            40,
        );
        optimal_offset_line(view, theta, kind)
    } else {
        let centroid = view.weighted_centroid();
        let mut dir = start.direction().to_vec();
        for _sweep in 0..2 {
            for p in 0..view.m.dim() {
                for q in (p + 1)..view.m.dim() {
                    let rotate = |ang: f64, dir: &[f64]| {
                        let mut nd = dir.to_vec();
                        let (c, s) = (ang.cos(), ang.sin());
                        nd[p] = c * dir[p] - s * dir[q];
                        nd[q] = s * dir[p] + c * dir[q];
                        nd
                    };
                    let score_at = |ang: f64| {
                        Line::new(centroid.clone(), rotate(ang, &dir))
                            .map_or(f64::INFINITY, |l| view.score(&l, kind))
                    };
                    let (ang, _) = golden_min(score_at, -spread, spread, 24);
                    dir = rotate(ang, &dir);
                }
            }
        }
        Line::new(centroid, dir).unwrap_or_else(|_| start.clone())
    }
}

/// Shared candidate pool: base candidates plus the refinement output for
/// every kind, so minima over the pool are monotone across kinds.
fn candidate_pool(view: &BallView) -> Vec<Line> {
    let mut base = base_candidates(view);
    if view.m.dim() == 2 {
        // Global direction scan with exact per-angle offsets.  The grid is
        // anchored at the principal axis so the candidate set transforms
        // with the data under rigid motions.
        let centroid = view.weighted_centroid();
        let eigen = symmetric_eigen(view.covariance(&centroid));
        let anchor = if eigen[0].0 > 1e-300 {
            eigen[0].1[1].atan2(eigen[0].1[0])
        } else {
            0.0
        };
        const SCAN: usize = 180;
        for kind in [BetaKind::B1, BetaKind::BInf] {
            let scored: Vec<(f64, usize)> = (0..SCAN)
                .into_par_iter()
                .map(|k| {
                    let theta = anchor + k as f64 * std::f64::consts::PI / SCAN as f64;
                    let line = optimal_offset_line(view, theta, kind);
                    (view.score(&line, kind), k)
                })
                .collect();
            let (_, k) = scored
                .into_iter()
                .min_by(|a, b| a.partial_cmp(b).unwrap())
                .unwrap();
            let theta = anchor + k as f64 * std::f64::consts::PI / SCAN as f64;
            base.push(optimal_offset_line(view, theta, kind));
        }
    }
    let mut pool = base.clone();
    for kind in [BetaKind::B1, BetaKind::BInf, BetaKind::BB1, BetaKind::BBInf] {
        let seed = base
            .par_iter()
            .map(|l| (view.score(l, kind), l))
            .collect::<Vec<_>>()
            .into_iter()
            .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap())
            .map(|(_, l)| l.clone())
            .unwrap();
        pool.push(refine_line(view, &seed, kind));
    }
    pool
}

/// Best line over the pool for `kind`; ties by lexicographic direction,
/// then base.
fn best_over_pool<'p>(view: &BallView, pool: &'p [Line], kind: BetaKind) -> (&'p Line, f64) {
    let scored: Vec<(f64, &Line)> = pool
        .par_iter()
        .map(|l| (view.score(l, kind), l))
        .collect();
    let mut best = &scored[0];
    for cand in &scored[1..] {
        let better = cand.0 < best.0
            || (cand.0 == best.0
                && (cand.1.direction(), &cand.1.base().coords)
                    < (best.1.direction(), &best.1.base().coords));
        if better {
            best = cand;
        }
    }
    (best.1, best.0)
}

/// Line minimizing the chosen unilateral β objective among the heuristic
/// candidates.
pub fn best_line(m: &DiscreteMeasure, b: &Ball, objective: LineObjective) -> Result<Line> {
    let view = BallView::new(m, b)?;
    let pool = candidate_pool(&view);
    let kind = match objective {
        LineObjective::Beta1 => BetaKind::B1,
        LineObjective::BetaInf => BetaKind::BInf,
    };
    Ok(best_over_pool(&view, &pool, kind).0.clone())
}

/// Flatness coefficient of the requested kind at the best line found.
pub fn beta(m: &DiscreteMeasure, b: &Ball, kind: BetaKind) -> Result<f64> {
    let view = BallView::new(m, b)?;
    let pool = candidate_pool(&view);
    Ok(best_over_pool(&view, &pool, kind).1)
}

/// Discretization of `c·H¹` on the chord `line ∩ b`: equal-mass atoms at
/// the midpoints of equal-length pieces.
fn discretize_flat(cand: &FlatCandidate, b: &Ball) -> Vec<(Point, f64)> {
    if cand.c <= 0.0 {
        return Vec::new();
    }
    let Some((t0, t1)) = cand.line.ball_chord(b) else {
        return Vec::new();
    };
    let step = (t1 - t0) / FLAT_ATOMS as f64;
    let mass = cand.c * step;
    (0..FLAT_ATOMS)
        .map(|k| (cand.line.point_at(t0 + (k as f64 + 0.5) * step), mass))
        .collect()
}

/// Bounded-Lipschitz distance between `μ|_b` and the discretized flat
/// candidate: sup over 1-Lipschitz `f` supported in `b` of `∫f dμ − ∫f dν`.
/// Computed through its exact transport dual: surplus mass of either sign
/// may be matched to the other sign at Euclidean cost or annihilated at the
/// sphere at cost `r(B) − |x − center|`.
pub fn dist_flat(m: &DiscreteMeasure, b: &Ball, cand: &FlatCandidate) -> f64 {
    let ids = m.atoms_in_ball(b);
    let supply: Vec<(Point, f64)> = ids
        .iter()
        .map(|&i| (m.position(i).clone(), m.weight(i)))
        .collect();
    transport_with_boundary(&supply, &discretize_flat(cand, b), b)
}

/// α coefficient: outer heuristic line search, inner exact golden-section
/// over `c` (the transport cost is convex in `c`: a minimum of flows each
/// affine in the demand masses). `c = 0` is always evaluated, which pins
/// `alpha ≤ 1` up to discretization.
pub fn alpha(m: &DiscreteMeasure, b: &Ball) -> Result<AlphaResult> {
    let view = BallView::new(m, b)?;
    let pool = candidate_pool(&view);
    // Outer candidates: best line per unilateral objective plus the
    // bilateral-β₁ pick, deduplicated; transport refinement happens through
    // the inner c search on each.
    let mut lines: Vec<Line> = Vec::new();
    for kind in [BetaKind::B1, BetaKind::BInf, BetaKind::BB1] {
        let (l, _) = best_over_pool(&view, &pool, kind);
        if !lines.iter().any(|p| {
            p.direction()
                .iter()
                .zip(l.direction())
                .all(|(a, c)| (a - c).abs() < 1e-12)
                && p.dist(l.base()) < 1e-12 * b.radius
        }) {
            lines.push(l.clone());
        }
    }
    let supply: Vec<(Point, f64)> = view
        .ids
        .iter()
        .map(|&i| (m.position(i).clone(), m.weight(i)))
        .collect();
    let zero_cost = transport_with_boundary(&supply, &[], b);
    let mut best: Option<(f64, FlatCandidate)> = Some((
        zero_cost,
        FlatCandidate {
            line: lines[0].clone(),
            c: 0.0,
        },
    ));
    let evals: Vec<(f64, FlatCandidate)> = lines
        .into_par_iter()
        .map(|line| {
            let chord = line.ball_chord(b).map_or(0.0, |(t0, t1)| t1 - t0);
            if chord <= 1e-12 * b.radius {
                return (zero_cost, FlatCandidate { line, c: 0.0 });
            }
            let c_max = 8.0 * view.mass / chord;
            let cost_at = |c: f64| {
                transport_with_boundary(
                    &supply,
                    &discretize_flat(&FlatCandidate { line: line.clone(), c }, b),
                    b,
                )
            };
            let (c_star, cost) = golden_min(cost_at, 0.0, c_max, 28);
            (cost, FlatCandidate { line, c: c_star })
        })
        .collect();
    for (cost, cand) in evals {
        if best.as_ref().is_none_or(|(bc, _)| cost < *bc) {
            best = Some((cost, cand));
        }
    }
    let (transport_cost, minimizer) = best.unwrap();
    Ok(AlphaResult {
        alpha: transport_cost / (b.radius * view.mass),
        minimizer,
        transport_cost,
    })
}

/// Exact cost of transporting the signed difference of two in-ball atom
/// lists to zero: matched mass pays Euclidean distance, surplus of either
/// sign is absorbed at the sphere at its distance to the boundary. Balanced
/// uncapacitated transportation, solved exactly by network simplex.
pub(crate) fn transport_with_boundary(
    supply: &[(Point, f64)],
    demand: &[(Point, f64)],
    b: &Ball,
) -> f64 {
    let bdist = |p: &Point| (b.radius - p.dist(&b.center)).max(0.0);
    let supply: Vec<&(Point, f64)> = supply.iter().filter(|a| a.1 > 0.0).collect();
    let demand: Vec<&(Point, f64)> = demand.iter().filter(|a| a.1 > 0.0).collect();
    if demand.is_empty() {
        return supply.iter().map(|(p, w)| w * bdist(p)).sum();
    }
    if supply.is_empty() {
        return demand.iter().map(|(q, w)| w * bdist(q)).sum();
    }
    let np = supply.len();
    let nq = demand.len();
    let total_pos: f64 = supply.iter().map(|a| a.1).sum();
    let total_neg: f64 = demand.iter().map(|a| a.1).sum();
    // Nodes: supply atoms, demand atoms, then a boundary source feeding
    // demand left unmatched and a boundary sink absorbing supply left
    // unmatched; the boundary pair carries each side's counterweight so
    // the balance vector sums to zero.
    let (bs, bt) = (np + nq, np + nq + 1);
    let mut balance = vec![0.0f64; np + nq + 2];
    let mut g = NetSimplex::new(np + nq + 2);
    for (i, (p, w)) in supply.iter().enumerate() {
        balance[i] = *w;
        for (j, (q, _)) in demand.iter().enumerate() {
            g.add(i, np + j, p.dist(q));
        }
        g.add(i, bt, bdist(p));
    }
    for (j, (q, w)) in demand.iter().enumerate() {
        balance[np + j] = -w;
        g.add(bs, np + j, bdist(q));
    }
    g.add(bs, bt, 0.0);
    balance[bs] = total_neg;
    balance[bt] = -total_pos;
    // Initial strongly feasible tree: annihilate everything through the
    // boundary pair, rooted at the boundary sink.  Supply arcs point up
    // (any flow), demand arcs point down with positive flow.
    let mut parent = vec![usize::MAX; np + nq + 2];
    let mut parent_arc = vec![usize::MAX; np + nq + 2];
    for i in 0..np {
        parent[i] = bt;
        parent_arc[i] = i * (nq + 1) + nq;
    }
    for j in 0..nq {
        parent[np + j] = bs;
        parent_arc[np + j] = np * (nq + 1) + j;
    }
    parent[bs] = bt;
    parent_arc[bs] = np * (nq + 1) + nq;
    g.solve(&balance, bt, parent, parent_arc)
}

/// Uncapacitated min-cost transportation by the primal network simplex on
/// an explicit spanning tree.  The caller provides a feasible starting
/// tree that is strongly feasible (every tree arc pointing away from the
/// root carries positive flow); the leaving arc is always the last
/// blocking arc met when traversing the pivot cycle from its apex in the
/// entering direction, which keeps the tree strongly feasible and rules
/// out cycling on degenerate pivots.
struct NetSimplex {
    n: usize,
    tail: Vec<u32>,
    head: Vec<u32>,
    cost: Vec<f64>,
    scale: f64,
}

impl NetSimplex {
    fn new(n: usize) -> NetSimplex {
        NetSimplex {
            n,
            tail: Vec::new(),
            head: Vec::new(),
            cost: Vec::new(),
            scale: 0.0,
        }
    }

    fn add(&mut self, u: usize, v: usize, cost: f64) {
        self.tail.push(u as u32);
        self.head.push(v as u32);
        self.cost.push(cost);
        self.scale = self.scale.max(cost.abs());
    }

    /// Potential of `node` implied by its tree arc `a` and the potential
    /// `pip` of the node across the arc: tree arcs carry zero reduced cost.
    fn pi_across(&self, a: usize, node: usize, pip: f64) -> f64 {
        if self.head[a] as usize == node {
            self.cost[a] + pip
        } else {
            pip - self.cost[a]
        }
    }

    /// Solve for the balance vector (positive supply, negative demand,
    /// zero sum), starting from the caller's feasible spanning tree where
    /// `parent_arc[v]` joins `v` to `parent[v]` and the root has neither.
    fn solve(&self, balance: &[f64], root: usize, mut parent: Vec<usize>, mut parent_arc: Vec<usize>) -> f64 {
        let n = self.n;
        let m = self.tail.len();
        let mut children: Vec<Vec<u32>> = (0..n).map(|_| Vec::new()).collect();
        for v in 0..n {
            if v != root {
                children[parent[v]].push(v as u32);
            }
        }
        let mut depth = vec![0u32; n];
        let mut pi = vec![0.0f64; n];
        let mut order = Vec::with_capacity(n);
        let mut stack = vec![root];
        while let Some(x) = stack.pop() {
            order.push(x);
            for &c in &children[x] {
                let c = c as usize;
                depth[c] = depth[x] + 1;
                pi[c] = self.pi_across(parent_arc[c], c, pi[x]);
                stack.push(c);
            }
        }
        // Tree flows by excess accumulation from the leaves upward.
        let mut flow = vec![0.0f64; m];
        let mut excess = balance.to_vec();
        for &x in order.iter().rev() {
            if x == root {
                continue;
            }
            let a = parent_arc[x];
            flow[a] = if self.tail[a] as usize == x {
                excess[x]
            } else {
                -excess[x]
            };
            excess[parent[x]] += excess[x];
        }
        let tol = 1e-12 * self.scale.max(1.0);
        let block = 256usize.max(m / 32);
        let mut cursor = 0usize;
        let pivot_cap = 300 * (n + 2) + 30_000;
        let mut pivots = 0usize;
        loop {
            // Entering arc: most negative reduced cost within the first
            // round-robin block that contains any candidate.
            let mut enter = usize::MAX;
            let mut best = -tol;
            let mut scanned = 0usize;
            while scanned < m {
                let take = block.min(m - scanned);
                for _ in 0..take {
                    let a = cursor;
                    cursor += 1;
                    if cursor == m {
                        cursor = 0;
                    }
                    let cr = self.cost[a] + pi[self.tail[a] as usize] - pi[self.head[a] as usize];
                    if cr < best {
                        best = cr;
                        enter = a;
                    }
                }
                scanned += take;
                if enter != usize::MAX {
                    break;
                }
            }
            if enter == usize::MAX {
                break;
            }
            pivots += 1;
            assert!(
                pivots <= pivot_cap,
                "transportation simplex failed to converge"
            );
            let (eu, ev) = (self.tail[enter] as usize, self.head[enter] as usize);
            let mut a = eu;
            let mut b = ev;
            while depth[a] > depth[b] {
                a = parent[a];
            }
            while depth[b] > depth[a] {
                b = parent[b];
            }
            while a != b {
                a = parent[a];
                b = parent[b];
            }
            let apex = a;
            // The cycle pushes flow eu -> ev across the entering arc, so it
            // runs downward from the apex on the tail side and upward on
            // the head side.  Ratio test over the opposing tree arcs, ties
            // resolved toward the arc met last when walking the cycle from
            // the apex along the push direction.
            let mut eu_chain = Vec::new();
            let mut x = eu;
            while x != apex {
                eu_chain.push(x);
                x = parent[x];
            }
            let mut ev_chain = Vec::new();
            x = ev;
            while x != apex {
                ev_chain.push(x);
                x = parent[x];
            }
            let la = eu_chain.len() as i64;
            let mut theta = f64::INFINITY;
            let mut leave_key = -1i64;
            let mut leave_node = usize::MAX;
            for (i, &x) in eu_chain.iter().enumerate() {
                let arc = parent_arc[x];
                if self.tail[arc] as usize == x {
                    let bound = flow[arc];
                    let key = la - 1 - i as i64;
                    if bound < theta || (bound == theta && key > leave_key) {
                        theta = bound;
                        leave_key = key;
                        leave_node = x;
                    }
                }
            }
            for (j, &x) in ev_chain.iter().enumerate() {
                let arc = parent_arc[x];
                if self.head[arc] as usize == x {
                    let bound = flow[arc];
                    let key = la + 1 + j as i64;
                    if bound < theta || (bound == theta && key > leave_key) {
                        theta = bound;
                        leave_key = key;
                        leave_node = x;
                    }
                }
            }
            assert!(theta.is_finite(), "transportation cycle is unbounded");
            flow[enter] += theta;
            for &x in &eu_chain {
                let arc = parent_arc[x];
                if self.tail[arc] as usize == x {
                    flow[arc] -= theta;
                } else {
                    flow[arc] += theta;
                }
            }
            for &x in &ev_chain {
                let arc = parent_arc[x];
                if self.head[arc] as usize == x {
                    flow[arc] -= theta;
                } else {
                    flow[arc] += theta;
                }
            }
            let z = leave_node;
            flow[parent_arc[z]] = 0.0;
            let (inside, outside) = if leave_key < la { (eu, ev) } else { (ev, eu) };
            // Re-hang the subtree cut off by the leaving arc: reverse the
            // parent chain from the entering endpoint inside the subtree
            // up to the cut, then refresh its depths and potentials.
            let stop = parent[z];
            let mut cur = inside;
            let mut new_parent = outside;
            let mut new_arc = enter;
            while cur != stop {
                let old_parent = parent[cur];
                let old_arc = parent_arc[cur];
                let pos = children[old_parent]
                    .iter()
                    .position(|&y| y as usize == cur)
                    .unwrap();
                children[old_parent].swap_remove(pos);
                children[new_parent].push(cur as u32);
                parent[cur] = new_parent;
                parent_arc[cur] = new_arc;
                new_parent = cur;
                new_arc = old_arc;
                cur = old_parent;
            }
            depth[inside] = depth[outside] + 1;
            pi[inside] = self.pi_across(enter, inside, pi[outside]);
            stack.clear();
            stack.push(inside);
            while let Some(x) = stack.pop() {
                for &c in &children[x] {
                    let c = c as usize;
                    depth[c] = depth[x] + 1;
                    pi[c] = self.pi_across(parent_arc[c], c, pi[x]);
                    stack.push(c);
                }
            }
        }
        (0..m).map(|a| flow[a] * self.cost[a]).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::Point;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn unit_ball() -> Ball {
        Ball::new(Point::xy(0.0, 0.0), 1.0).unwrap()
    }

    fn random_measure(rng: &mut ChaCha8Rng, n: usize, span: f64) -> DiscreteMeasure {
        DiscreteMeasure::new(
            2,
            (0..n)
                .map(|_| {
                    (
                        Point::xy(
                            (rng.random::<f64>() - 0.5) * span,
                            (rng.random::<f64>() - 0.5) * span,
                        ),
                        0.1 + rng.random::<f64>(),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn line_normalizes_direction() {
        let l = Line::new(Point::xy(0.0, 0.0), vec![3.0, 4.0]).unwrap();
        let norm: f64 = l.direction().iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!((l.dist(&Point::xy(-4.0, 3.0)) - 5.0).abs() < 1e-12);
        assert!(l.dist(&Point::xy(3.0, 4.0)) < 1e-12);
    }

    #[test]
    fn line_chord_through_center() {
        let l = Line::new(Point::xy(0.0, 0.3), vec![1.0, 0.0]).unwrap();
        let b = unit_ball();
        let (t0, t1) = l.ball_chord(&b).unwrap();
        let half = (1.0f64 - 0.09).sqrt();
        assert!((t1 - t0 - 2.0 * half).abs() < 1e-12);
    }

    #[test]
    fn collinear_atoms_zero_beta() {
        let m = DiscreteMeasure::new(
            2,
            (0..40)
                .map(|i| (Point::xy(-0.95 + 0.05 * i as f64, 0.0), 1.0))
                .collect(),
        )
        .unwrap();
        let b = unit_ball();
        assert!(beta(&m, &b, BetaKind::B1).unwrap() < 1e-12);
        assert!(beta(&m, &b, BetaKind::BInf).unwrap() < 1e-12);
        // Atoms span the chord at spacing 0.05: the line-to-support term is
        // at most half the spacing.
        assert!(beta(&m, &b, BetaKind::BB1).unwrap() <= 0.05);
        assert!(beta(&m, &b, BetaKind::BBInf).unwrap() <= 0.05);
        let l = best_line(&m, &b, LineObjective::Beta1).unwrap();
        assert!(l.dist(&Point::xy(0.3, 0.0)) < 1e-12);
    }

    #[test]
    fn parallel_rows_midline() {
        let h = 0.12;
        let mut atoms = Vec::new();
        for i in 0..81 {
            let x = -1.0 + 0.025 * i as f64;
            atoms.push((Point::xy(x, h / 2.0), 1.0));
            atoms.push((Point::xy(x, -h / 2.0), 1.0));
        }
        let m = DiscreteMeasure::new(2, atoms).unwrap();
        let b = unit_ball();
        let binf = beta(&m, &b, BetaKind::BInf).unwrap();
        assert!((binf - h / 2.0).abs() < 1e-9, "{binf}");
        let l = best_line(&m, &b, LineObjective::BetaInf).unwrap();
        assert!(l.dist(&Point::xy(0.0, 0.0)) < 1e-9);
    }

    #[test]
    fn beta1_matches_brute_grid() {
        // Noncollinear three-atom instance; oracle scans a dense
        // (angle, offset) grid.
        let m = DiscreteMeasure::new(
            2,
            vec![
                (Point::xy(0.0, 0.0), 1.0),
                (Point::xy(0.45, 0.5), 1.0),
                (Point::xy(-0.4, 0.3), 1.0),
            ],
        )
        .unwrap();
        let b = unit_ball();
        let got = beta(&m, &b, BetaKind::B1).unwrap();
        let mut brute = f64::INFINITY;
        for a in 0..720 {
            let theta = a as f64 * std::f64::consts::PI / 720.0;
            for o in -400..=400 {
                let line = line_from_angle(theta, o as f64 * 0.0025);
                let val: f64 = (0..3)
                    .map(|i| m.weight(i) * line.dist(m.position(i)))
                    .sum::<f64>()
                    / 3.0;
                brute = brute.min(val);
            }
        }
        assert!((got - brute).abs() <= 1e-3, "{got} vs {brute}");
        assert!(got <= brute + 1e-9, "search must not be worse than grid");
    }

    #[test]
    fn best_line_beats_random_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for case in 0..6 {
            let m = random_measure(&mut rng, 20, 1.6);
            let b = unit_ball();
            for (objective, kind) in [
                (LineObjective::Beta1, BetaKind::B1),
                (LineObjective::BetaInf, BetaKind::BInf),
            ] {
                let view = BallView::new(&m, &b).unwrap();
                let line = best_line(&m, &b, objective).unwrap();
                let got = view.score(&line, kind);
                let mut random_best = f64::INFINITY;
                for _ in 0..100_000 {
                    let theta = rng.random::<f64>() * std::f64::consts::PI;
                    let offset = (rng.random::<f64>() - 0.5) * 2.0;
                    let cand = line_from_angle(theta, offset);
                    random_best = random_best.min(view.score(&cand, kind));
                }
                assert!(
                    got <= random_best + 1e-9,
                    "case {case}: {got} > {random_best}"
                );
            }
        }
    }

    #[test]
    fn beta_kind_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..8 {
            let m = random_measure(&mut rng, 30, 1.8);
            let b = unit_ball();
            let b1 = beta(&m, &b, BetaKind::B1).unwrap();
            let binf = beta(&m, &b, BetaKind::BInf).unwrap();
            let bb1 = beta(&m, &b, BetaKind::BB1).unwrap();
            let bbinf = beta(&m, &b, BetaKind::BBInf).unwrap();
            assert!(b1 <= binf + 1e-12);
            assert!(b1 <= bb1 + 1e-12);
            assert!(binf <= bbinf + 1e-12);
        }
    }

    #[test]
    fn rigid_motion_and_dilation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = random_measure(&mut rng, 25, 1.5);
        let b = unit_ball();
        let (theta, shift, lambda, wscale) = (0.7f64, (0.3, -1.2), 2.5, 3.0);
        let (c, s) = (theta.cos(), theta.sin());
        let moved = DiscreteMeasure::new(
            2,
            (0..m.len())
                .map(|i| {
                    let p = m.position(i);
                    let (x, y) = (p.coords[0], p.coords[1]);
                    (
                        Point::xy(
                            lambda * (c * x - s * y) + shift.0,
                            lambda * (s * x + c * y) + shift.1,
                        ),
                        m.weight(i) * wscale,
                    )
                })
                .collect(),
        )
        .unwrap();
        let mb = Ball::new(Point::xy(shift.0, shift.1), lambda).unwrap();
        for kind in [BetaKind::B1, BetaKind::BInf, BetaKind::BB1, BetaKind::BBInf] {
            let v0 = beta(&m, &b, kind).unwrap();
            let v1 = beta(&moved, &mb, kind).unwrap();
            assert!((v0 - v1).abs() <= 1e-9 * v0.max(1.0), "{kind:?}: {v0} vs {v1}");
        }
        let a0 = alpha(&m, &b).unwrap().alpha;
        let a1 = alpha(&moved, &mb).unwrap().alpha;
        assert!((a0 - a1).abs() <= 1e-9 * a0.max(1.0), "{a0} vs {a1}");
    }

    #[test]
    fn dist_flat_zero_on_identical_discretization() {
        let b = unit_ball();
        let cand = FlatCandidate {
            line: Line::new(Point::xy(0.0, 0.1), vec![1.0, 0.0]).unwrap(),
            c: 0.8,
        };
        let atoms = discretize_flat(&cand, &b);
        let m = DiscreteMeasure::new(2, atoms).unwrap();
        let v = dist_flat(&m, &b, &cand);
        assert!(v <= 1e-12, "{v}");
    }

    #[test]
    fn dist_flat_single_atom_annihilation() {
        let m = DiscreteMeasure::new(2, vec![(Point::xy(0.0, 0.0), 0.7)]).unwrap();
        let b = Ball::new(Point::xy(0.0, 0.0), 2.0).unwrap();
        let cand = FlatCandidate {
            line: Line::new(Point::xy(0.0, 0.0), vec![1.0, 0.0]).unwrap(),
            c: 0.0,
        };
        let v = dist_flat(&m, &b, &cand);
        assert!((v - 0.7 * 2.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn transport_matches_lp_vertex_enumeration() {
        // 3 supply + 3 demand atoms: enumerate the vertices of the dual
        // polytope {|f| ≤ dist to sphere, f(p) − f(q) ≤ |p − q|} and
        // compare the maximum of the dual objective with the flow value.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let b = unit_ball();
        for case in 0..3 {
            let pts: Vec<Point> = (0..6)
                .map(|_| {
                    let ang = rng.random::<f64>() * std::f64::consts::TAU;
                    let rad = rng.random::<f64>() * 0.9;
                    Point::xy(rad * ang.cos(), rad * ang.sin())
                })
                .collect();
            let ws: Vec<f64> = (0..6).map(|_| 0.2 + rng.random::<f64>()).collect();
            let supply: Vec<(Point, f64)> =
                (0..3).map(|i| (pts[i].clone(), ws[i])).collect();
            let demand: Vec<(Point, f64)> =
                (3..6).map(|i| (pts[i].clone(), ws[i])).collect();
            let flow = transport_with_boundary(&supply, &demand, &b);

            // Constraint rows a·f ≤ rhs over f ∈ R^6 (indices 0-2 supply,
            // 3-5 demand).
            let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
            for i in 0..6 {
                let bd = 1.0 - pts[i].dist(&b.center);
                let mut up = vec![0.0; 6];
                up[i] = 1.0;
                rows.push((up.clone(), bd));
                let mut dn = vec![0.0; 6];
                dn[i] = -1.0;
                rows.push((dn, bd));
            }
            for i in 0..3 {
                for j in 3..6 {
                    let d = pts[i].dist(&pts[j]);
                    let mut fw = vec![0.0; 6];
                    fw[i] = 1.0;
                    fw[j] = -1.0;
                    rows.push((fw.clone(), d));
                    let mut bw = vec![0.0; 6];
                    bw[i] = -1.0;
                    bw[j] = 1.0;
                    rows.push((bw, d));
                }
            }
            let mut best = f64::NEG_INFINITY;
            let n_rows = rows.len();
            let mut combo = [0usize; 6];
            // All 6-subsets of rows; solve the 6x6 system, keep feasible
            // vertices.
            fn visit(
                rows: &[(Vec<f64>, f64)],
                combo: &mut [usize; 6],
                start: usize,
                depth: usize,
                n_rows: usize,
                ws: &[f64],
                best: &mut f64,
            ) {
                if depth == 6 {
                    let mut a = [[0.0f64; 7]; 6];
                    for (r, &idx) in combo.iter().enumerate() {
                        for c in 0..6 {
                            a[r][c] = rows[idx].0[c];
                        }
                        a[r][6] = rows[idx].1;
                    }
                    // Gaussian elimination with partial pivoting.
                    for col in 0..6 {
                        let piv = (col..6).max_by(|&x, &y| {
                            a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap()
                        });
                        let piv = piv.unwrap();
                        if a[piv][col].abs() < 1e-9 {
                            return;
                        }
                        a.swap(col, piv);
                        for r in 0..6 {
                            if r != col {
                                let factor = a[r][col] / a[col][col];
                                for c in col..7 {
                                    a[r][c] -= factor * a[col][c];
                                }
                            }
                        }
                    }
                    let f: Vec<f64> = (0..6).map(|i| a[i][6] / a[i][i]).collect();
                    for (ar, rhs) in rows {
                        let lhs: f64 = ar.iter().zip(&f).map(|(x, y)| x * y).sum();
                        if lhs > rhs + 1e-9 {
                            return;
                        }
                    }
                    let obj: f64 = (0..3).map(|i| ws[i] * f[i]).sum::<f64>()
                        - (3..6).map(|j| ws[j] * f[j]).sum::<f64>();
                    if obj > *best {
                        *best = obj;
                    }
                    return;
                }
                for idx in start..n_rows {
                    combo[depth] = idx;
                    visit(rows, combo, idx + 1, depth + 1, n_rows, ws, best);
                }
            }
            visit(&rows, &mut combo, 0, 0, n_rows, &ws, &mut best);
            assert!(
                (flow - best).abs() <= 1e-9 * flow.max(1.0),
                "case {case}: flow {flow} vs LP {best}"
            );
        }
    }

    #[test]
    fn alpha_small_on_dense_flat_sampling() {
        let n = 400;
        let m = DiscreteMeasure::new(
            2,
            (0..n)
                .map(|i| {
                    let x = -1.2 + 2.4 * (i as f64 + 0.5) / n as f64;
                    (Point::xy(x, 0.0), 2.4 / n as f64)
                })
                .collect(),
        )
        .unwrap();
        let b = unit_ball();
        let res = alpha(&m, &b).unwrap();
        assert!(res.alpha < 0.02, "{}", res.alpha);
        assert!(res.minimizer.c > 0.0);
        assert!(
            (res.alpha - res.transport_cost / (b.radius * m.ball_mass(&b))).abs() < 1e-15
        );
    }

    #[test]
    fn alpha_at_most_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..5 {
            let m = random_measure(&mut rng, 40, 2.2);
            let b = unit_ball();
            if m.atoms_in_ball(&b).is_empty() {
                continue;
            }
            let res = alpha(&m, &b).unwrap();
            // c = 0 annihilates everything at distance-to-sphere cost
            // ≤ r(B)·μ(B).
            assert!(res.alpha <= 1.0 + 1e-12, "{}", res.alpha);
        }
    }

    #[test]
    fn alpha_increases_with_noise() {
        let mut flat_scores = Vec::new();
        let mut noisy_scores = Vec::new();
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (amp, bucket) in [(0.01, &mut flat_scores), (0.04, &mut noisy_scores)] {
                let n = 200;
                let m = DiscreteMeasure::new(
                    2,
                    (0..n)
                        .map(|i| {
                            let x = -1.2 + 2.4 * (i as f64 + 0.5) / n as f64;
                            let y = (rng.random::<f64>() - 0.5) * 2.0 * amp;
                            (Point::xy(x, y), 2.4 / n as f64)
                        })
                        .collect(),
                )
                .unwrap();
                bucket.push(alpha(&m, &unit_ball()).unwrap().alpha);
            }
        }
        let worst_flat = flat_scores.iter().cloned().fold(0.0f64, f64::max);
        let best_noisy = noisy_scores.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            worst_flat < best_noisy,
            "flat {flat_scores:?} vs noisy {noisy_scores:?}"
        );
    }

    struct RefEdge {
        to: usize,
        rev: usize,
        cap: f64,
        cost: f64,
    }

    /// Independent reference solver: successive shortest paths with
    /// potentials on the capacitated source/sink formulation.
    struct RefFlow {
        graph: Vec<Vec<RefEdge>>,
        scale: f64,
    }

    impl RefFlow {
        fn new(n: usize) -> RefFlow {
            RefFlow {
                graph: (0..n).map(|_| Vec::new()).collect(),
                scale: 0.0,
            }
        }

        fn add(&mut self, u: usize, v: usize, cap: f64, cost: f64) {
            self.scale = self.scale.max(cap.abs());
            let ru = self.graph[u].len();
            let rv = self.graph[v].len();
            self.graph[u].push(RefEdge {
                to: v,
                rev: rv,
                cap,
                cost,
            });
            self.graph[v].push(RefEdge {
                to: u,
                rev: ru,
                cap: 0.0,
                cost: -cost,
            });
        }

        fn min_cost_flow(&mut self, s: usize, t: usize, target: f64) -> f64 {
            let n = self.graph.len();
            let eps = 1e-15 * self.scale.max(1.0);
            let mut phi = vec![0.0f64; n];
            let mut remaining = target;
            let mut total_cost = 0.0;
            while remaining > eps {
                let mut dist = vec![f64::INFINITY; n];
                let mut done = vec![false; n];
                let mut prev = vec![(usize::MAX, usize::MAX); n];
                dist[s] = 0.0;
                loop {
                    let mut u = usize::MAX;
                    let mut du = f64::INFINITY;
                    for v in 0..n {
                        if !done[v] && dist[v] < du {
                            du = dist[v];
                            u = v;
                        }
                    }
                    if u == usize::MAX || u == t {
                        break;
                    }
                    done[u] = true;
                    for (k, e) in self.graph[u].iter().enumerate() {
                        if e.cap <= eps || done[e.to] {
                            continue;
                        }
                        let nd = du + (e.cost + phi[u] - phi[e.to]).max(0.0);
                        if nd < dist[e.to] {
                            dist[e.to] = nd;
                            prev[e.to] = (u, k);
                        }
                    }
                }
                if !dist[t].is_finite() {
                    break;
                }
                // Cap potential updates at dist[t]: labels past the sink
                // are stale upper bounds when Dijkstra exits early.
                let dt = dist[t];
                for v in 0..n {
                    phi[v] += if dist[v].is_finite() { dist[v].min(dt) } else { dt };
                }
                let mut push = remaining;
                let mut v = t;
                while v != s {
                    let (u, k) = prev[v];
                    push = push.min(self.graph[u][k].cap);
                    v = u;
                }
                let mut v = t;
                while v != s {
                    let (u, k) = prev[v];
                    let rev = self.graph[u][k].rev;
                    self.graph[u][k].cap -= push;
                    total_cost += push * self.graph[u][k].cost;
                    self.graph[v][rev].cap += push;
                    v = u;
                }
                remaining -= push;
            }
            total_cost
        }
    }

    fn reference_transport(supply: &[(Point, f64)], demand: &[(Point, f64)], b: &Ball) -> f64 {
        let np = supply.len();
        let nq = demand.len();
        let total_pos: f64 = supply.iter().map(|a| a.1).sum();
        let total_neg: f64 = demand.iter().map(|a| a.1).sum();
        if total_pos <= 0.0 && total_neg <= 0.0 {
            return 0.0;
        }
        let bdist = |p: &Point| (b.radius - p.dist(&b.center)).max(0.0);
        let (bs, bt) = (np + nq, np + nq + 1);
        let (s, t) = (np + nq + 2, np + nq + 3);
        let mut g = RefFlow::new(np + nq + 4);
        for (i, (_, w)) in supply.iter().enumerate() {
            g.add(s, i, *w, 0.0);
        }
        g.add(s, bs, total_neg, 0.0);
        for (j, (_, w)) in demand.iter().enumerate() {
            g.add(np + j, t, *w, 0.0);
        }
        g.add(bt, t, total_pos, 0.0);
        let inf = total_pos + total_neg;
        for (i, (p, _)) in supply.iter().enumerate() {
            for (j, (q, _)) in demand.iter().enumerate() {
                g.add(i, np + j, inf, p.dist(q));
            }
            g.add(i, bt, inf, bdist(p));
        }
        for (j, (q, _)) in demand.iter().enumerate() {
            g.add(bs, np + j, inf, bdist(q));
        }
        g.add(bs, bt, inf, 0.0);
        g.min_cost_flow(s, t, total_pos + total_neg)
    }

    #[test]
    fn transport_matches_reference_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let b = unit_ball();
        for case in 0..40 {
            let np = rng.random_range(1..=9);
            let nq = rng.random_range(1..=9);
            let equalize = case % 3 == 0;
            let mk = |n: usize, rng: &mut ChaCha8Rng| {
                (0..n)
                    .map(|_| {
                        let r = rng.random::<f64>().sqrt() * 0.95;
                        let ang = rng.random::<f64>() * std::f64::consts::TAU;
                        let w = if equalize {
                            0.25
                        } else {
                            rng.random::<f64>() + 0.05
                        };
                        (Point::xy(r * ang.cos(), r * ang.sin()), w)
                    })
                    .collect::<Vec<_>>()
            };
            let supply = mk(np, &mut rng);
            let demand = mk(nq, &mut rng);
            let fast = transport_with_boundary(&supply, &demand, &b);
            let slow = reference_transport(&supply, &demand, &b);
            assert!(
                (fast - slow).abs() <= 1e-9,
                "case {case}: simplex {fast} vs reference {slow}"
            );
        }
    }

    #[test]
    fn transport_equal_weight_degenerate_grid() {
        // Maximal tie degeneracy: equal weights, collinear rows.
        let b = unit_ball();
        let supply: Vec<(Point, f64)> = (0..30)
            .map(|i| (Point::xy(-0.8 + 0.05 * i as f64, 0.3), 0.1))
            .collect();
        let demand: Vec<(Point, f64)> = (0..40)
            .map(|j| (Point::xy(-0.78 + 0.04 * j as f64, -0.2), 0.075))
            .collect();
        let fast = transport_with_boundary(&supply, &demand, &b);
        let slow = reference_transport(&supply, &demand, &b);
        assert!(
            (fast - slow).abs() <= 1e-9,
            "simplex {fast} vs reference {slow}"
        );
    }

    #[test]
    fn weighted_median_basics() {
        assert_eq!(weighted_median(vec![(1.0, 1.0), (5.0, 1.0), (2.0, 1.0)]), 2.0);
        assert_eq!(weighted_median(vec![(1.0, 10.0), (5.0, 1.0)]), 1.0);
    }

    #[test]
    fn jacobi_eigen_diagonalizes() {
        let a = vec![
            vec![2.0, 1.0, 0.0],
            vec![1.0, 3.0, 1.0],
            vec![0.0, 1.0, 2.0],
        ];
        let eig = symmetric_eigen(a.clone());
        for (lam, v) in &eig {
            for r in 0..3 {
                let av: f64 = (0..3).map(|c| a[r][c] * v[c]).sum();
                assert!((av - lam * v[r]).abs() < 1e-10);
            }
        }
        assert!((eig[0].0 - 4.0).abs() < 1e-10);
    }
}
