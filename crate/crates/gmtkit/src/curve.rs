//! Iterative polygonal approximation of an atomic measure, with transplanted
//! and pushforward measures on the approximating curves.
//!
//! Generation 1 is the segment between a diameter-realizing atom pair. Each
//! later generation revisits every segment: segments at or below the
//! generation's scale floor survive unchanged, segments resolved by a
//! caller-supplied stop cell survive unchanged, and every other segment is
//! split at the support atom nearest its midpoint (with a freeze-and-flag
//! guard when no atom is close enough for a flat-safe split). On top of the
//! curve tower: the projection maps between consecutive generations
//! ([`pi_map`]), a partition-of-unity transplant of the atom measure onto the
//! extended curve ([`build_nu`]), the arclength pushforward with per-segment
//! cosine densities ([`build_sigma`]), and density-ratio statistics with a
//! two-scale averaging square function ([`density_ratio_stats`]).
//!
//! The extended curve adds, to each generation, the two rays of the
//! generation-1 line beyond the fixed endpoints. The rays are truncated at
//! [`EXTENSION_FACTOR`] times the initial diameter: every partition bump is
//! centered within one diameter of the endpoints and reaches at most 1.5
//! diameters further, so the truncation is invisible to every integral and
//! every ratio statistic computed here.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{pairwise_sum, Ball, BallMass, Chain, DiscreteMeasure, Point, PolylineMeasure};

/// Midpoint-insertion freeze threshold: a segment is frozen (flatness
/// violation) when no support atom lies within `FLAT_FREEZE_FACTOR * eps0 *
/// length` of its midpoint.
pub const FLAT_FREEZE_FACTOR: f64 = 10.0;

/// Extension rays reach this multiple of the initial diameter beyond each
/// fixed endpoint. Must exceed 2.5 so the bump supports never see the cutoff.
pub const EXTENSION_FACTOR: f64 = 3.0;

/// Subsegments per skeleton piece when realizing nu/sigma as polylines.
/// Chosen so polyline ball masses of the sampled smooth density stay within
/// 1% of adaptive quadrature on the shipped suites.
pub const POLYLINE_REFINEMENT: usize = 16;

/// A point counts as lying on the curve when within this distance of it.
pub const ON_CURVE_TOL: f64 = 1e-9;

/// How each segment of a generation arose from the previous generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentRule {
    /// The single generation-1 segment between the fixed endpoints.
    #[serde(rename = "root")]
    Root,
    /// Kept: length at or below the generation's scale floor.
    #[serde(rename = "A")]
    A,
    /// Kept: a stop cell of comparable side meets the doubled cell ball.
    #[serde(rename = "B")]
    B,
    /// Left child of a midpoint split.
    #[serde(rename = "C-left")]
    CLeft,
    /// Right child of a midpoint split.
    #[serde(rename = "C-right")]
    CRight,
    /// Kept and flagged: the split rule fired but no support atom allowed a
    /// flat-safe split (nearest atom too far, an endpoint, or projecting
    /// outside the open segment).
    #[serde(rename = "flat-violation")]
    FlatViolation,
}

impl SegmentRule {
    /// Rules that can never be revisited by a later split: the stop-cell rule
    /// and the flatness freeze depend only on fixed geometry, while the scale
    /// floor of rule A keeps shrinking with the generation index.
    pub fn is_permanent_freeze(self) -> bool {
        matches!(self, SegmentRule::B | SegmentRule::FlatViolation)
    }

    /// True for the two children of a midpoint split.
    pub fn is_split_child(self) -> bool {
        matches!(self, SegmentRule::CLeft | SegmentRule::CRight)
    }
}

/// One polygonal generation: vertices joined by straight segments.
///
/// Segment `j` joins `vertices[j]` to `vertices[j + 1]`; every vertex is a
/// support atom of the input measure (the two outermost are the fixed
/// diameter pair). Vertices of the previous generation appear in order as a
/// subsequence.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolyCurve {
    /// 1-based generation index.
    pub k: usize,
    pub vertices: Vec<Point>,
    /// Cached segment lengths (`vertices.len() - 1` entries).
    pub lengths: Vec<f64>,
    /// How each segment arose from the previous generation.
    pub rules: Vec<SegmentRule>,
    /// Index of the generating segment in the previous generation
    /// (`None` only on generation 1).
    pub parents: Vec<Option<usize>>,
}

impl PolyCurve {
    pub fn segment_count(&self) -> usize {
        self.lengths.len()
    }

    pub fn endpoints(&self, j: usize) -> (&Point, &Point) {
        (&self.vertices[j], &self.vertices[j + 1])
    }

    pub fn midpoint(&self, j: usize) -> Point {
        self.vertices[j].lerp(&self.vertices[j + 1], 0.5)
    }

    /// The segment ball B(midpoint, segment length) that drives the partition
    /// bumps and the exclusivity diagnostics.
    pub fn ball(&self, j: usize) -> Ball {
        Ball {
            center: self.midpoint(j),
            radius: self.lengths[j],
        }
    }

    pub fn total_length(&self) -> f64 {
        pairwise_sum(&self.lengths)
    }

    /// Child segment indices in the next generation, from the parent links of
    /// `next`: a contiguous run of one (kept) or two (split) segments.
    pub fn children_in(&self, next: &PolyCurve, j: usize) -> std::ops::Range<usize> {
        let lo = next.parents.partition_point(|p| p.unwrap_or(0) < j);
        let hi = next.parents.partition_point(|p| p.unwrap_or(0) <= j);
        lo..hi
    }
}

/// A cell the splitting rules treat as already resolved: a segment meeting
/// the doubled cell ball (radius = `side`) at length at most `side` is left
/// alone.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StopCell {
    pub center: Point,
    /// Cell side length; the doubled cell ball has this radius.
    pub side: f64,
}

impl StopCell {
    pub fn new(center: Point, side: f64) -> Result<Self> {
        if !(side > 0.0) || !side.is_finite() {
            return Err(Error::Precondition(format!(
                "stop-cell side must be positive and finite, got {side}"
            )));
        }
        Ok(StopCell { center, side })
    }
}

/// The full tower of curves plus the extension-line data shared by the
/// transplanted and pushforward measures.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurveChain {
    /// Generations 1..=K in order.
    pub curves: Vec<PolyCurve>,
    /// Fixed endpoints: a diameter-realizing atom pair of the input measure.
    pub z_a: Point,
    pub z_b: Point,
    /// Initial diameter |z_a - z_b|.
    pub d0: f64,
    /// Unit direction of the generation-1 line, from `z_a` to `z_b`.
    pub line_dir: Vec<f64>,
    /// Arclength of each extension ray beyond its endpoint.
    pub extension_len: f64,
    /// The flatness parameter the chain was built with.
    pub eps0: f64,
    /// Max over all executed splits of |inserted atom - midpoint| / segment
    /// length; bounded by `FLAT_FREEZE_FACTOR * eps0` by construction.
    pub max_midpoint_offset: f64,
}

impl CurveChain {
    /// The deepest generation built.
    pub fn last(&self) -> &PolyCurve {
        self.curves.last().expect("chain always holds generation 1")
    }

    /// Generation `k` (1-based).
    pub fn curve(&self, k: usize) -> Result<&PolyCurve> {
        if k == 0 || k > self.curves.len() {
            return Err(Error::Precondition(format!(
                "generation {k} not built (chain holds 1..={})",
                self.curves.len()
            )));
        }
        Ok(&self.curves[k - 1])
    }

    /// (generation, segment) pairs frozen by the flatness-violation guard.
    pub fn flagged(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for c in &self.curves {
            for (j, r) in c.rules.iter().enumerate() {
                if *r == SegmentRule::FlatViolation {
                    out.push((c.k, j));
                }
            }
        }
        out
    }

    /// The scale floor every generation-k segment is expected to respect:
    /// 2^{-(k+2)/2} times the initial diameter.
    pub fn length_floor(&self, k: usize) -> f64 {
        (-((k + 2) as f64) / 2.0).exp2() * self.d0
    }

    /// The keep threshold of the short-segment rule at generation k:
    /// 2^{-(k+1)/2} times the initial diameter.
    pub fn keep_threshold(&self, k: usize) -> f64 {
        (-((k + 1) as f64) / 2.0).exp2() * self.d0
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("curve chain serialization cannot fail")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Distance from `x` to the segment [a, b].
fn dist_to_segment(x: &Point, a: &Point, b: &Point) -> f64 {
    let ab = b.sub(a);
    let len_sq: f64 = ab.iter().map(|v| v * v).sum();
    if len_sq == 0.0 {
        return x.dist(a);
    }
    let t: f64 = x
        .sub(a)
        .iter()
        .zip(&ab)
        .map(|(u, v)| u * v)
        .sum::<f64>()
        / len_sq;
    x.dist(&a.lerp(b, t.clamp(0.0, 1.0)))
}

/// Projection parameter of `x` onto the line through `a` with unit direction
/// `u` (arclength from `a`).
fn proj_param(x: &Point, a: &Point, u: &[f64]) -> f64 {
    x.sub(a).iter().zip(u).map(|(v, w)| v * w).sum()
}

fn unit_direction(a: &Point, b: &Point, len: f64) -> Vec<f64> {
    b.sub(a).iter().map(|v| v / len).collect()
}

/// Angle in [0, pi/2] between the lines spanned by `v` and `w`.
fn line_angle(v: &[f64], w: &[f64]) -> f64 {
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nv == 0.0 || nw == 0.0 {
        return 0.0;
    }
    let dot: f64 = v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / (nv * nw);
    // Perpendicular component of v-hat relative to w-hat: well-conditioned
    // near zero angle, where acos of the clamped dot is not.
    let perp_sq: f64 = v
        .iter()
        .zip(w)
        .map(|(a, b)| a / nv - dot * b / nw)
        .map(|x| x * x)
        .sum();
    perp_sq.sqrt().atan2(dot.abs())
}

enum Decision {
    Keep(SegmentRule),
    Split { atom: usize, offset_ratio: f64 },
}

/// Builds the tower of approximating curves for `m`.
///
/// Generation 1 is the segment between a diameter-realizing atom pair (ties:
/// lexicographically smallest index pair). Each later generation applies, per
/// segment and in this order: the short-segment keep rule (length at most
/// 2^{-(k+1)/2} d0), the stop-cell keep rule (some cell with side >= length
/// whose doubled ball meets the segment), and otherwise a split at the
/// support atom nearest the segment midpoint (ties: lowest atom index). A
/// would-be split is frozen and flagged instead when the nearest atom is
/// farther than `FLAT_FREEZE_FACTOR * eps0 * length` from the midpoint, is
/// one of the segment's endpoints, or projects outside the open segment (the
/// latter two keep the generation maps well-defined).
///
/// Construction stops at `k_max` generations, or earlier once every segment
/// is frozen by a rule that no later generation can revisit.
pub fn build_curves(
    m: &DiscreteMeasure,
    stop_cells: &[StopCell],
    eps0: f64,
    k_max: usize,
) -> Result<CurveChain> {
    if m.len() < 2 {
        return Err(Error::Precondition(format!(
            "curve construction needs >= 2 atoms, got {}",
            m.len()
        )));
    }
    if !(eps0 > 0.0 && eps0 <= 0.1) {
        return Err(Error::Precondition(format!(
            "eps0 must lie in (0, 0.1], got {eps0}"
        )));
    }
    if k_max == 0 {
        return Err(Error::Precondition("k_max must be >= 1".into()));
    }
    for q in stop_cells {
        if q.center.dim() != m.dim() {
            return Err(Error::DimMismatch {
                expected: m.dim(),
                got: q.center.dim(),
            });
        }
    }

    let (ia, ib) = m.diameter_pair()?;
    let z_a = m.position(ia).clone();
    let z_b = m.position(ib).clone();
    let d0 = z_a.dist(&z_b);
    if d0 == 0.0 {
        return Err(Error::DegenerateGeometry(
            "all atoms coincide: the initial diameter vanishes".into(),
        ));
    }
    let line_dir = unit_direction(&z_a, &z_b, d0);

    let mut chain = CurveChain {
        curves: vec![PolyCurve {
            k: 1,
            vertices: vec![z_a.clone(), z_b.clone()],
            lengths: vec![d0],
            rules: vec![SegmentRule::Root],
            parents: vec![None],
        }],
        z_a,
        z_b,
        d0,
        line_dir,
        extension_len: EXTENSION_FACTOR * d0,
        eps0,
        max_midpoint_offset: 0.0,
    };

    while chain.curves.len() < k_max {
        let cur = chain.curves.last().unwrap();
        let keep_at = chain.keep_threshold(cur.k);

        let decisions: Vec<Decision> = (0..cur.segment_count())
            .into_par_iter()
            .map(|j| {
                let len = cur.lengths[j];
                if len <= keep_at {
                    return Decision::Keep(SegmentRule::A);
                }
                let (a, b) = cur.endpoints(j);
                if stop_cells
                    .iter()
                    .any(|q| len <= q.side && dist_to_segment(&q.center, a, b) <= q.side)
                {
                    return Decision::Keep(SegmentRule::B);
                }
                let z = cur.midpoint(j);
                let (atom, d) = m
                    .nearest_atom(&z, None)
                    .expect("measure verified non-empty");
                if d > FLAT_FREEZE_FACTOR * eps0 * len {
                    return Decision::Keep(SegmentRule::FlatViolation);
                }
                let p = m.position(atom);
                if p == a || p == b {
                    return Decision::Keep(SegmentRule::FlatViolation);
                }
                let u = unit_direction(a, b, len);
                let t = proj_param(p, a, &u);
                if !(t > 0.0 && t < len) {
                    return Decision::Keep(SegmentRule::FlatViolation);
                }
                Decision::Split {
                    atom,
                    offset_ratio: d / len,
                }
            })
            .collect();

        let cur = chain.curves.last().unwrap();
        let mut vertices = vec![cur.vertices[0].clone()];
        let mut lengths = Vec::new();
        let mut rules = Vec::new();
        let mut parents = Vec::new();
        let mut any_split = false;
        for (j, dec) in decisions.iter().enumerate() {
            match dec {
                Decision::Keep(rule) => {
                    vertices.push(cur.vertices[j + 1].clone());
                    lengths.push(cur.lengths[j]);
                    rules.push(*rule);
                    parents.push(Some(j));
                }
                Decision::Split { atom, offset_ratio } => {
                    any_split = true;
                    let p = m.position(*atom).clone();
                    let (a, b) = cur.endpoints(j);
                    lengths.push(a.dist(&p));
                    lengths.push(p.dist(b));
                    vertices.push(p);
                    vertices.push(cur.vertices[j + 1].clone());
                    rules.push(SegmentRule::CLeft);
                    rules.push(SegmentRule::CRight);
                    parents.push(Some(j));
                    parents.push(Some(j));
                    if *offset_ratio > chain.max_midpoint_offset {
                        chain.max_midpoint_offset = *offset_ratio;
                    }
                }
            }
        }

        let all_permanent = !any_split
            && rules.iter().all(|r| r.is_permanent_freeze());
        let k = cur.k + 1;
        chain.curves.push(PolyCurve {
            k,
            vertices,
            lengths,
            rules,
            parents,
        });
        if all_permanent {
            // Every segment is beyond the reach of all future rules; later
            // generations would repeat this polyline verbatim.
            break;
        }
    }

    Ok(chain)
}

/// Maps a point of generation `k` to generation `k + 1`: the unique point of
/// the replacing one- or two-segment arc whose orthogonal projection onto the
/// generation-k segment equals `x`. Identity on kept segments and on the
/// extension rays.
///
/// `x` must lie within [`ON_CURVE_TOL`] of generation `k` or of the extension
/// line outside the endpoints.
pub fn pi_map(chain: &CurveChain, k: usize, x: &Point) -> Result<Point> {
    let cur = chain.curve(k)?;
    let next = chain.curve(k + 1).map_err(|_| {
        Error::Precondition(format!(
            "pi_map needs generation {} built (chain holds 1..={})",
            k + 1,
            chain.curves.len()
        ))
    })?;
    if x.dim() != chain.z_a.dim() {
        return Err(Error::DimMismatch {
            expected: chain.z_a.dim(),
            got: x.dim(),
        });
    }

    let mut seg: Option<usize> = None;
    for j in 0..cur.segment_count() {
        let (a, b) = cur.endpoints(j);
        if dist_to_segment(x, a, b) <= ON_CURVE_TOL {
            seg = Some(j);
            break;
        }
    }
    let j = match seg {
        Some(j) => j,
        None => {
            // Extension rays: identity.
            let s = proj_param(x, &chain.z_a, &chain.line_dir);
            let foot = chain.z_a.lerp(&chain.z_b, s / chain.d0);
            if x.dist(&foot) <= ON_CURVE_TOL && !(0.0..=chain.d0).contains(&s) {
                return Ok(x.clone());
            }
            return Err(Error::Precondition(
                "point does not lie on the curve or its extension rays".into(),
            ));
        }
    };

    let children = cur.children_in(next, j);
    if children.len() == 1 {
        return Ok(x.clone());
    }
    let (a, b) = cur.endpoints(j);
    let len = cur.lengths[j];
    let u = unit_direction(a, b, len);
    let p = &next.vertices[children.start + 1];
    let t = proj_param(x, a, &u).clamp(0.0, len);
    let t_p = proj_param(p, a, &u);
    if t <= t_p {
        Ok(a.lerp(p, t / t_p))
    } else {
        Ok(p.lerp(b, (t - t_p) / (len - t_p)))
    }
}

/// Geometric and combinatorial health report for one generation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurveDiagnostics {
    pub k: usize,
    /// No foreign segment enters the open half segment-ball of another.
    pub half_ball_exclusive: bool,
    pub half_ball_violations: Vec<(usize, usize)>,
    /// Max over consecutive vertex triples of |angle - pi|.
    pub max_angle_gap: f64,
    /// The sixth-scale segment balls are pairwise disjoint.
    pub sixth_balls_disjoint: bool,
    pub sixth_ball_violations: Vec<(usize, usize)>,
    /// Max over sampled (x on curve, r) of H^1(curve intersect B(x, r)) /
    /// (2r): the straight chord through the center scores exactly 1, so any
    /// excess measures how strongly the curve revisits the ball.
    pub ad_constant: f64,
    /// Per-segment sum over the ancestry of squared turning angles
    /// (line angle between a split child and its parent, per split step).
    pub ancestry_angle_sq: Vec<f64>,
    pub max_ancestry_angle_sq: f64,
    /// Split-child to parent length ratios observed at this generation
    /// (min, max over rule-C children; (0, 0) when the generation has none).
    pub min_split_ratio: f64,
    pub max_split_ratio: f64,
    /// Every split child at this generation lies strictly inside
    /// (parent/3, parent/sqrt(2)).
    pub split_bounds_ok: bool,
    /// min over segments of length / (2^{-(k+2)/2} d0).
    pub min_length_ratio: f64,
    /// Every segment respects the scale floor 2^{-(k+2)/2} d0.
    pub length_floor_ok: bool,
}

/// Strictness guard for the open-ball diagnostics: legitimate boundary
/// contacts (shared vertices sit exactly on the half-ball boundary) must not
/// be flagged through float rounding.
const BALL_CONTACT_GUARD: f64 = 1.0 - 1e-9;

pub fn curve_diagnostics(chain: &CurveChain, k: usize) -> Result<CurveDiagnostics> {
    let cur = chain.curve(k)?;
    let n = cur.segment_count();
    let mids: Vec<Point> = (0..n).map(|j| cur.midpoint(j)).collect();

    let half_ball_violations: Vec<(usize, usize)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|j| {
            let r = 0.5 * cur.lengths[j] * BALL_CONTACT_GUARD;
            let z = &mids[j];
            (0..n)
                .filter(move |&h| h != j)
                .filter(move |&h| {
                    let (a, b) = cur.endpoints(h);
                    dist_to_segment(z, a, b) < r
                })
                .map(move |h| (j, h))
        })
        .collect();

    let sixth_ball_violations: Vec<(usize, usize)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|j| {
            let mids = &mids;
            (j + 1..n)
                .filter(move |&h| {
                    mids[j].dist(&mids[h])
                        < (cur.lengths[j] + cur.lengths[h]) / 6.0 * BALL_CONTACT_GUARD
                })
                .map(move |h| (j, h))
        })
        .collect();

    let mut max_angle_gap = 0.0f64;
    for j in 1..cur.vertices.len() - 1 {
        let v = &cur.vertices[j];
        let u1: Vec<f64> = cur.vertices[j - 1].sub(v);
        let u2: Vec<f64> = cur.vertices[j + 1].sub(v);
        let n1 = cur.lengths[j - 1];
        let n2 = cur.lengths[j];
        // |u1/n1 + u2/n2| = 2 sin(gap / 2): well-conditioned near straight.
        let s_sq: f64 = u1
            .iter()
            .zip(&u2)
            .map(|(a, b)| a / n1 + b / n2)
            .map(|x| x * x)
            .sum();
        let gap = 2.0 * (0.5 * s_sq.sqrt()).min(1.0).asin();
        if gap > max_angle_gap {
            max_angle_gap = gap;
        }
    }

    // Empirical linear-growth constant of arclength on the curve.
    let curve_line = PolylineMeasure::new(
        chain.z_a.dim(),
        vec![Chain {
            vertices: cur.vertices.clone(),
            density: vec![1.0; n],
        }],
    )?;
    let min_len = cur.lengths.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut ad_constant = 0.0f64;
    let stride = (n / 128).max(1);
    let r_grid = log_grid(min_len / 2.0, 2.0 * chain.d0, 16);
    for j in (0..n).step_by(stride) {
        for x in [&cur.vertices[j], &mids[j]] {
            for &r in &r_grid {
                let ratio = curve_line.ball_mass(&Ball {
                    center: x.clone(),
                    radius: r,
                }) / (2.0 * r);
                if ratio > ad_constant {
                    ad_constant = ratio;
                }
            }
        }
    }

    // Ancestry turning angles, accumulated down the tower.
    let mut acc: Vec<f64> = vec![0.0];
    for m in 1..k {
        let parent = &chain.curves[m - 1];
        let child = &chain.curves[m];
        let mut next_acc = vec![0.0; child.segment_count()];
        for h in 0..child.segment_count() {
            let pj = child.parents[h].expect("generation >= 2 has parents");
            let mut a = acc[pj];
            if child.rules[h].is_split_child() {
                let (pa, pb) = parent.endpoints(pj);
                let (ca, cb) = child.endpoints(h);
                let ang = line_angle(&pb.sub(pa), &cb.sub(ca));
                a += ang * ang;
            }
            next_acc[h] = a;
        }
        acc = next_acc;
    }
    let max_ancestry_angle_sq = acc.iter().cloned().fold(0.0, f64::max);

    // Split-child length ratios at this generation.
    let (mut min_split, mut max_split) = (f64::INFINITY, 0.0f64);
    if k >= 2 {
        let parent = &chain.curves[k - 2];
        for h in 0..n {
            if cur.rules[h].is_split_child() {
                let ratio = cur.lengths[h] / parent.lengths[cur.parents[h].unwrap()];
                min_split = min_split.min(ratio);
                max_split = max_split.max(ratio);
            }
        }
    }
    let has_splits = max_split > 0.0;
    let split_bounds_ok =
        !has_splits || (min_split > 1.0 / 3.0 && max_split < 1.0 / 2.0f64.sqrt());

    let floor = chain.length_floor(k);
    let min_length_ratio = min_len / floor;

    Ok(CurveDiagnostics {
        k,
        half_ball_exclusive: half_ball_violations.is_empty(),
        half_ball_violations,
        max_angle_gap,
        sixth_balls_disjoint: sixth_ball_violations.is_empty(),
        sixth_ball_violations,
        ad_constant,
        max_ancestry_angle_sq,
        ancestry_angle_sq: acc,
        min_split_ratio: if has_splits { min_split } else { 0.0 },
        max_split_ratio: if has_splits { max_split } else { 0.0 },
        split_bounds_ok,
        min_length_ratio,
        length_floor_ok: min_length_ratio >= 1.0,
    })
}

/// Largest observed ratio dist(atom, curve_k) / (eps0 * max(d_stop(atom),
/// 2^{-k/2} d0)): the empirical constant of the support-proximity property.
/// `d_stop(x)` is the smallest `|x - center| + side` over the stop cells the
/// chain was built against (zero when none are given, so the scale floor
/// alone sets the allowance).
pub fn proximity_constant(
    chain: &CurveChain,
    k: usize,
    m: &DiscreteMeasure,
    stop_cells: &[StopCell],
) -> Result<f64> {
    let cur = chain.curve(k)?;
    let scale_floor = (-(k as f64) / 2.0).exp2() * chain.d0;
    let worst = (0..m.len())
        .into_par_iter()
        .map(|i| {
            let x = m.position(i);
            let dist_curve = (0..cur.segment_count())
                .map(|j| {
                    let (a, b) = cur.endpoints(j);
                    dist_to_segment(x, a, b)
                })
                .fold(f64::INFINITY, f64::min);
            let d_stop = if stop_cells.is_empty() {
                0.0
            } else {
                stop_cells
                    .iter()
                    .map(|q| x.dist(&q.center) + q.side)
                    .fold(f64::INFINITY, f64::min)
            };
            dist_curve / (chain.eps0 * d_stop.max(scale_floor))
        })
        .reduce(|| 0.0, f64::max);
    Ok(worst)
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if !(lo > 0.0) || hi <= lo || n < 2 {
        return vec![lo.max(hi)];
    }
    let step = (hi / lo).ln() / (n - 1) as f64;
    (0..n).map(|i| lo * (i as f64 * step).exp()).collect()
}

// ---------------------------------------------------------------------------
// Extended-curve skeleton shared by the transplanted and pushforward measures.
// ---------------------------------------------------------------------------

/// One straight piece of the extended curve, in arclength order from the far
/// end of the a-side ray to the far end of the b-side ray.
struct SkeletonPiece {
    a: Point,
    b: Point,
    /// Segment index on the generation-k curve; `None` on the extension rays.
    curve_index: Option<usize>,
}

/// Builds the coarse pieces of the extended curve of generation `k`: the
/// a-side ray (split geometrically, matching the adjacent segment scale near
/// the endpoint), the curve segments, and the b-side ray.
fn build_skeleton(chain: &CurveChain, k: usize) -> Result<Vec<SkeletonPiece>> {
    let cur = chain.curve(k)?;
    let u = &chain.line_dir;
    let shift = |base: &Point, s: f64, sign: f64| -> Point {
        Point {
            coords: base
                .coords
                .iter()
                .zip(u)
                .map(|(c, d)| c + sign * s * d)
                .collect(),
        }
    };

    let ray_cuts = |seed: f64| -> Vec<f64> {
        let mut cuts = vec![0.0];
        let mut step = seed;
        while *cuts.last().unwrap() < chain.extension_len {
            let next = (cuts.last().unwrap() + step).min(chain.extension_len);
            cuts.push(next);
            step *= 2.0;
        }
        cuts
    };

    let mut pieces = Vec::new();
    let a_cuts = ray_cuts(cur.lengths[0]);
    for w in a_cuts.windows(2).rev() {
        pieces.push(SkeletonPiece {
            a: shift(&chain.z_a, w[1], -1.0),
            b: shift(&chain.z_a, w[0], -1.0),
            curve_index: None,
        });
    }
    for j in 0..cur.segment_count() {
        pieces.push(SkeletonPiece {
            a: cur.vertices[j].clone(),
            b: cur.vertices[j + 1].clone(),
            curve_index: Some(j),
        });
    }
    let b_cuts = ray_cuts(*cur.lengths.last().unwrap());
    for w in b_cuts.windows(2) {
        pieces.push(SkeletonPiece {
            a: shift(&chain.z_b, w[0], 1.0),
            b: shift(&chain.z_b, w[1], 1.0),
            curve_index: None,
        });
    }
    Ok(pieces)
}

/// Refines the skeleton into one polyline chain, `POLYLINE_REFINEMENT`
/// subsegments per piece, with the provided per-subsegment densities.
fn refined_polyline(
    dim: usize,
    pieces: &[SkeletonPiece],
    density: Vec<f64>,
) -> Result<PolylineMeasure> {
    let mut vertices = Vec::with_capacity(pieces.len() * POLYLINE_REFINEMENT + 1);
    vertices.push(pieces[0].a.clone());
    for piece in pieces {
        for i in 1..=POLYLINE_REFINEMENT {
            vertices.push(piece.a.lerp(&piece.b, i as f64 / POLYLINE_REFINEMENT as f64));
        }
    }
    PolylineMeasure::new(dim, vec![Chain { vertices, density }])
}

/// Midpoints of the refined subsegments, piece by piece.
fn refined_midpoints(pieces: &[SkeletonPiece]) -> Vec<(usize, Point)> {
    let mut out = Vec::with_capacity(pieces.len() * POLYLINE_REFINEMENT);
    for (pi, piece) in pieces.iter().enumerate() {
        for i in 0..POLYLINE_REFINEMENT {
            let t = (i as f64 + 0.5) / POLYLINE_REFINEMENT as f64;
            out.push((pi, piece.a.lerp(&piece.b, t)));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Partition of unity on the segment balls.
// ---------------------------------------------------------------------------

/// Radial C^2 bump: 1 on [0, 1], quintic smoothstep down to 0 across [1, 3/2].
pub fn bump(s: f64) -> f64 {
    if s <= 1.0 {
        1.0
    } else if s >= 1.5 {
        0.0
    } else {
        let t = 2.0 * (s - 1.0);
        1.0 - t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
    }
}

/// Radial C^2 averaging kernel: 1 on [0, 1/2], quintic smoothstep down to 0
/// across [1/2, 1].
pub fn averaging_kernel(s: f64) -> f64 {
    if s <= 0.5 {
        1.0
    } else if s >= 1.0 {
        0.0
    } else {
        let t = 2.0 * (s - 0.5);
        1.0 - t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
    }
}

/// The sequential partition of unity subordinate to the segment balls of one
/// generation: bump `j` sits on B(midpoint_j, length_j) scaled by 3/2, and
/// the sequential correction theta_{j+1} = (1 - sum_{h<=j} theta_h) *
/// bump_{j+1} makes the family sum to at most 1 everywhere and exactly 1 on
/// the union of the segment balls.
pub struct PartitionOfUnity {
    centers: Vec<Point>,
    radii: Vec<f64>,
}

impl PartitionOfUnity {
    pub fn new(chain: &CurveChain, k: usize) -> Result<Self> {
        let cur = chain.curve(k)?;
        Ok(PartitionOfUnity {
            centers: (0..cur.segment_count()).map(|j| cur.midpoint(j)).collect(),
            radii: cur.lengths.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.radii.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radii.is_empty()
    }

    /// Indices whose bump support (radius 3/2 of the segment ball) can touch
    /// the segment [a, b]; ascending.
    fn active_on_segment(&self, a: &Point, b: &Point) -> Vec<usize> {
        (0..self.len())
            .filter(|&j| dist_to_segment(&self.centers[j], a, b) < 1.5 * self.radii[j])
            .collect()
    }

    fn active_at(&self, x: &Point) -> Vec<usize> {
        (0..self.len())
            .filter(|&j| x.dist(&self.centers[j]) < 1.5 * self.radii[j])
            .collect()
    }

    /// Sequential evaluation over an ascending candidate list (complete for
    /// `x`: bumps not listed must vanish at `x`). Returns the nonzero
    /// (index, theta_j) pairs and the running sum.
    fn thetas_over(&self, x: &Point, candidates: &[usize]) -> (Vec<(usize, f64)>, f64) {
        let mut out = Vec::new();
        let mut acc = 0.0f64;
        for &j in candidates {
            let raw = bump(x.dist(&self.centers[j]) / self.radii[j]);
            if raw > 0.0 {
                let theta = (1.0 - acc) * raw;
                if theta > 0.0 {
                    out.push((j, theta));
                    acc += theta;
                }
            }
        }
        (out, acc)
    }

    /// All nonzero theta_j at `x` plus their sum (at most 1; exactly 1 on the
    /// union of the open segment balls, up to float rounding).
    pub fn thetas_at(&self, x: &Point) -> (Vec<(usize, f64)>, f64) {
        let candidates = self.active_at(x);
        self.thetas_over(x, &candidates)
    }

    /// theta_j evaluated alone (still includes the sequential correction).
    pub fn theta_j(&self, x: &Point, j: usize) -> f64 {
        let (pairs, _) = self.thetas_at(x);
        pairs
            .into_iter()
            .find(|(h, _)| *h == j)
            .map(|(_, t)| t)
            .unwrap_or(0.0)
    }
}

/// Nonzero partition values at `x` for generation `k`, plus their sum.
pub fn partition_thetas(chain: &CurveChain, k: usize, x: &Point) -> Result<(Vec<(usize, f64)>, f64)> {
    Ok(PartitionOfUnity::new(chain, k)?.thetas_at(x))
}

/// Adaptive Simpson quadrature with absolute tolerance.
fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
        h / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    if b <= a {
        return 0.0;
    }
    let fa = f(a);
    let fm = f(0.5 * (a + b));
    let fb = f(b);
    rec(f, a, b, fa, fm, fb, simpson(fa, fm, fb, b - a), tol, 24)
}

/// Absolute quadrature tolerance per skeleton piece for the bump line
/// integrals.
const LINE_QUAD_TOL: f64 = 1e-10;

/// The transplant of the atom measure onto the extended curve of generation
/// `k`, realized as a refined polyline.
#[derive(Clone, Debug)]
pub struct NuMeasure {
    pub polyline: PolylineMeasure,
    /// Bump coefficient per curve segment: atom mass seen by the bump over
    /// its arclength integral.
    pub coefficients: Vec<f64>,
    /// The background coefficient filling the partition complement; set to
    /// the first segment's coefficient.
    pub c0: f64,
    /// Arclength integral of each bump over the extended curve (adaptive
    /// quadrature).
    pub line_integrals: Vec<f64>,
    /// Atom mass seen by each bump.
    pub atom_masses: Vec<f64>,
    /// Total atom weight outside every open segment ball (reported).
    pub uncovered_mass: f64,
    /// Transplanted interior mass: sum of coefficient * line integral.
    pub transplanted_mass: f64,
}

/// Transplants `m` onto the extended curve of generation `k`: bump
/// coefficients are atom mass over arclength mass per bump, the background
/// coefficient copies the first bump, and the resulting smooth density is
/// sampled at the midpoints of a [`POLYLINE_REFINEMENT`]-fold refinement.
///
/// Errors when a bump sees positive atom mass but has vanishing arclength
/// integral (degenerate geometry), and when the sampled density fails to be
/// strictly positive somewhere.
pub fn build_nu(chain: &CurveChain, k: usize, m: &DiscreteMeasure) -> Result<NuMeasure> {
    let cur = chain.curve(k)?;
    if m.dim() != chain.z_a.dim() {
        return Err(Error::DimMismatch {
            expected: chain.z_a.dim(),
            got: m.dim(),
        });
    }
    let part = PartitionOfUnity::new(chain, k)?;
    let pieces = build_skeleton(chain, k)?;
    let n = cur.segment_count();

    // Atom-side integrals: evaluate the partition once per atom and scatter.
    let per_atom: Vec<(Vec<(usize, f64)>, f64)> = (0..m.len())
        .into_par_iter()
        .map(|i| part.thetas_at(m.position(i)))
        .collect();
    let mut atom_masses = vec![0.0f64; n];
    let mut uncovered = Vec::new();
    for (i, (pairs, _)) in per_atom.iter().enumerate() {
        let w = m.weight(i);
        for (j, theta) in pairs {
            atom_masses[*j] += theta * w;
        }
        let covered = (0..n).any(|j| m.position(i).dist(&part.centers[j]) < part.radii[j]);
        if !covered {
            uncovered.push(w);
        }
    }
    let uncovered_mass = pairwise_sum(&uncovered);

    // Arclength-side integrals over the extended curve, bump by bump.
    let active_per_piece: Vec<Vec<usize>> = pieces
        .par_iter()
        .map(|p| part.active_on_segment(&p.a, &p.b))
        .collect();
    let line_integrals: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut total = 0.0;
            for (pi, piece) in pieces.iter().enumerate() {
                if !active_per_piece[pi].contains(&j) {
                    continue;
                }
                let len = piece.a.dist(&piece.b);
                let candidates = &active_per_piece[pi];
                let integrand = |t: f64| -> f64 {
                    let x = piece.a.lerp(&piece.b, t);
                    let (pairs, _) = part.thetas_over(&x, candidates);
                    pairs
                        .into_iter()
                        .find(|(h, _)| *h == j)
                        .map(|(_, th)| th)
                        .unwrap_or(0.0)
                        * len
                };
                total += adaptive_simpson(&integrand, 0.0, 1.0, LINE_QUAD_TOL);
            }
            total
        })
        .collect();

    let total_atom_mass = m.total_mass();
    let mut coefficients = vec![0.0f64; n];
    for j in 0..n {
        if line_integrals[j] <= 1e-14 * cur.lengths[j] {
            if atom_masses[j] > 1e-12 * total_atom_mass {
                return Err(Error::DegenerateGeometry(format!(
                    "bump {j} carries atom mass {} but its arclength integral vanishes",
                    atom_masses[j]
                )));
            }
            coefficients[j] = 0.0;
        } else {
            coefficients[j] = atom_masses[j] / line_integrals[j];
        }
    }
    let c0 = coefficients[0];

    // Sampled smooth density on the refined polyline.
    let density: Vec<f64> = refined_midpoints(&pieces)
        .par_iter()
        .map(|(pi, x)| {
            let (pairs, sum) = part.thetas_over(x, &active_per_piece[*pi]);
            let interior: f64 = pairs.iter().map(|(j, th)| coefficients[*j] * th).sum();
            c0 * (1.0 - sum) + interior
        })
        .collect();
    if let Some(bad) = density.iter().position(|d| !(*d > 0.0)) {
        return Err(Error::DegenerateGeometry(format!(
            "transplanted density is not positive at subsegment {bad}; \
             the atoms do not populate the bumps covering it"
        )));
    }
    let polyline = refined_polyline(chain.z_a.dim(), &pieces, density)?;

    let products: Vec<f64> = coefficients
        .iter()
        .zip(&line_integrals)
        .map(|(c, i)| c * i)
        .collect();
    Ok(NuMeasure {
        polyline,
        coefficients,
        c0,
        line_integrals,
        atom_masses,
        uncovered_mass,
        transplanted_mass: pairwise_sum(&products),
    })
}

/// Per-segment density data of the arclength pushforward measure.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SigmaDensity {
    pub k: usize,
    /// Constant density per curve segment (1 on the extension rays).
    pub g: Vec<f64>,
    /// Cosine factor to the parent segment (1 for kept segments).
    pub step_cosines: Vec<f64>,
    /// Total curve mass: sum of g * length (extension rays excluded).
    pub curve_mass: f64,
}

/// The pushforward of arclength on the extended generation-1 line through
/// the generation maps, realized exactly: each split child carries its
/// parent's density times the cosine of the line angle between child and
/// parent (the child's projection onto the parent line has length cosine
/// times the child's), and kept segments carry their density unchanged.
/// Density 1 on generation 1 and on the extension rays.
pub fn build_sigma(chain: &CurveChain, k: usize) -> Result<(PolylineMeasure, SigmaDensity)> {
    let cur = chain.curve(k)?;
    let mut g = vec![1.0f64];
    let mut step_cosines = vec![1.0f64];
    for m in 1..k {
        let parent = &chain.curves[m - 1];
        let child = &chain.curves[m];
        let mut g_next = vec![0.0f64; child.segment_count()];
        let mut cos_next = vec![1.0f64; child.segment_count()];
        for h in 0..child.segment_count() {
            let pj = child.parents[h].expect("generation >= 2 has parents");
            if child.rules[h].is_split_child() {
                let (pa, pb) = parent.endpoints(pj);
                let u = unit_direction(pa, pb, parent.lengths[pj]);
                let (ca, cb) = child.endpoints(h);
                let proj = proj_param(cb, ca, &u).abs();
                let cos = proj / child.lengths[h];
                g_next[h] = g[pj] * cos;
                cos_next[h] = cos;
            } else {
                g_next[h] = g[pj];
            }
        }
        g = g_next;
        step_cosines = cos_next;
    }
    if k == 1 {
        step_cosines = vec![1.0];
    }

    let pieces = build_skeleton(chain, k)?;
    let mut density = Vec::with_capacity(pieces.len() * POLYLINE_REFINEMENT);
    for piece in &pieces {
        let d = match piece.curve_index {
            Some(j) => g[j],
            None => 1.0,
        };
        density.extend(std::iter::repeat(d).take(POLYLINE_REFINEMENT));
    }
    let polyline = refined_polyline(chain.z_a.dim(), &pieces, density)?;

    let products: Vec<f64> = g.iter().zip(&cur.lengths).map(|(gi, li)| gi * li).collect();
    let curve_mass = pairwise_sum(&products);
    Ok((
        polyline,
        SigmaDensity {
            k,
            g,
            step_cosines,
            curve_mass,
        },
    ))
}

// ---------------------------------------------------------------------------
// Density-ratio statistics and the two-scale averaging square function.
// ---------------------------------------------------------------------------

/// Kernel-weighted line integrals of `nu` and `sigma` over their shared
/// polyline in one pass: the geometric weight of each subsegment (integral of
/// kernel(|x - y| / r) / r over arclength) is computed once and multiplied by
/// the two constant densities, so proportional densities give exactly
/// proportional results.
fn kernel_pair(nu: &PolylineMeasure, sigma: &PolylineMeasure, x: &Point, r: f64) -> (f64, f64) {
    let mut nu_parts = Vec::new();
    let mut sigma_parts = Vec::new();
    for (cn, cs) in nu.chains().iter().zip(sigma.chains()) {
        for (i, vv) in cs.vertices.windows(2).enumerate() {
            let (a, b) = (&vv[0], &vv[1]);
            // Clip the parameter interval to |x - y| <= r.
            let ab = b.sub(a);
            let e = a.sub(x);
            let qa: f64 = ab.iter().map(|v| v * v).sum();
            let qb: f64 = 2.0 * ab.iter().zip(&e).map(|(u, v)| u * v).sum::<f64>();
            let qc: f64 = e.iter().map(|v| v * v).sum::<f64>() - r * r;
            let disc = qb * qb - 4.0 * qa * qc;
            if disc <= 0.0 {
                continue;
            }
            let sq = disc.sqrt();
            let t1 = ((-qb - sq) / (2.0 * qa)).max(0.0);
            let t2 = ((-qb + sq) / (2.0 * qa)).min(1.0);
            if t2 <= t1 {
                continue;
            }
            let len = qa.sqrt();
            let geom = |t: f64| -> f64 {
                let y = a.lerp(b, t);
                averaging_kernel(x.dist(&y) / r) / r * len
            };
            let weight = adaptive_simpson(&geom, t1, t2, 1e-11 * (t2 - t1));
            nu_parts.push(cn.density[i] * weight);
            sigma_parts.push(cs.density[i] * weight);
        }
    }
    (pairwise_sum(&nu_parts), pairwise_sum(&sigma_parts))
}

fn shared_polyline_check(nu: &PolylineMeasure, sigma: &PolylineMeasure) -> Result<()> {
    if nu.chains().len() != sigma.chains().len() {
        return Err(Error::Precondition(
            "nu and sigma do not share a polyline (chain counts differ)".into(),
        ));
    }
    for (cn, cs) in nu.chains().iter().zip(sigma.chains()) {
        if cn.vertices != cs.vertices {
            return Err(Error::Precondition(
                "nu and sigma do not share a polyline (vertices differ)".into(),
            ));
        }
    }
    Ok(())
}

/// Two-scale smoothed-average difference of the density of `nu` against
/// `sigma` at `x` and scale `r`: the kernel-weighted mean at scale `r` minus
/// the one at scale `2r`. Vanishes (exactly, by shared quadrature weights)
/// when `nu` is a constant multiple of `sigma`. The two polylines must share
/// their vertices.
pub fn d_r(nu: &PolylineMeasure, sigma: &PolylineMeasure, x: &Point, r: f64) -> Result<f64> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::Precondition(format!("scale must be positive, got {r}")));
    }
    shared_polyline_check(nu, sigma)?;
    d_r_unchecked(nu, sigma, x, r)
}

fn d_r_unchecked(
    nu: &PolylineMeasure,
    sigma: &PolylineMeasure,
    x: &Point,
    r: f64,
) -> Result<f64> {
    let (n1, s1) = kernel_pair(nu, sigma, x, r);
    let (n2, s2) = kernel_pair(nu, sigma, x, 2.0 * r);
    if s1 <= 0.0 || s2 <= 0.0 {
        return Err(Error::Precondition(
            "kernel window sees no sigma mass at this point and scale".into(),
        ));
    }
    Ok(n1 / s1 - n2 / s2)
}

/// Density-ratio report over a shared nu/sigma polyline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DensityRatioStats {
    pub c0: f64,
    /// Per-chain, per-subsegment density ratio nu / sigma.
    pub f: Vec<Vec<f64>>,
    /// Exact integral of (f - c0)^2 against sigma.
    pub deviation_sq: f64,
    pub sigma_mass: f64,
    /// Log-spaced scales scanned by the square function.
    pub r_grid: Vec<f64>,
    /// Integral of |D_r f|^2 against sigma at each grid scale
    /// (midpoint quadrature with a deterministic sample stride).
    pub dr_mass: Vec<f64>,
    /// Square-function mass: sum of dr_mass weighted by the log step.
    pub dr_total: f64,
}

/// Number of evaluation points per scale for the square-function quadrature.
const DR_SAMPLES_PER_SCALE: usize = 200;
/// Number of scales in the square-function grid.
const DR_GRID_SIZE: usize = 12;

/// Per-subsegment density ratio f = nu/sigma, its exact squared deviation
/// from `c0` against sigma, and the two-scale square-function mass of f over
/// a log grid of scales. The two polylines must share vertices exactly
/// (both come from the same build path).
pub fn density_ratio_stats(
    nu: &PolylineMeasure,
    sigma: &PolylineMeasure,
    c0: f64,
) -> Result<DensityRatioStats> {
    shared_polyline_check(nu, sigma)?;

    let mut f = Vec::new();
    let mut dev_terms = Vec::new();
    let mut mass_terms = Vec::new();
    let mut mids: Vec<(Point, f64)> = Vec::new();
    let mut min_sub_len = f64::INFINITY;
    for (cn, cs) in nu.chains().iter().zip(sigma.chains()) {
        let mut fr = Vec::with_capacity(cs.density.len());
        for (i, vv) in cs.vertices.windows(2).enumerate() {
            let len = vv[0].dist(&vv[1]);
            let ratio = cn.density[i] / cs.density[i];
            let w = cs.density[i] * len;
            fr.push(ratio);
            dev_terms.push((ratio - c0) * (ratio - c0) * w);
            mass_terms.push(w);
            mids.push((vv[0].lerp(&vv[1], 0.5), w));
            min_sub_len = min_sub_len.min(len);
        }
        f.push(fr);
    }
    let deviation_sq = pairwise_sum(&dev_terms);
    let sigma_mass = pairwise_sum(&mass_terms);

    // Scale grid: from a few subsegments up to half the spatial extent.
    let verts = &nu.chains()[0].vertices;
    let extent = verts
        .first()
        .zip(verts.last())
        .map(|(a, b)| a.dist(b))
        .unwrap_or(1.0);
    let r_grid = log_grid(4.0 * min_sub_len, (extent / 2.0).max(8.0 * min_sub_len), DR_GRID_SIZE);

    let stride = (mids.len() / DR_SAMPLES_PER_SCALE).max(1);
    let sampled: Vec<&(Point, f64)> = mids.iter().step_by(stride).collect();
    let sampled_weight: f64 = pairwise_sum(&sampled.iter().map(|(_, w)| *w).collect::<Vec<_>>());
    let dr_mass: Vec<f64> = r_grid
        .par_iter()
        .map(|&r| {
            let terms: Vec<f64> = sampled
                .iter()
                .map(|(x, w)| match d_r_unchecked(nu, sigma, x, r) {
                    Ok(v) => v * v * w,
                    Err(_) => 0.0,
                })
                .collect();
            // Rescale the strided quadrature to the full sigma mass.
            pairwise_sum(&terms) * sigma_mass / sampled_weight
        })
        .collect();
    let dlog = if r_grid.len() >= 2 {
        (r_grid[1] / r_grid[0]).ln()
    } else {
        1.0
    };
    let weighted: Vec<f64> = dr_mass.iter().map(|m| m * dlog).collect();
    let dr_total = pairwise_sum(&weighted);

    Ok(DensityRatioStats {
        c0,
        f,
        deviation_sq,
        sigma_mass,
        r_grid,
        dr_mass,
        dr_total,
    })
}
