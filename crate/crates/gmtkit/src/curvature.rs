//! Menger curvature, truncated Cauchy transforms, and the Melnikov–Verdera
//! identity harness that ties the two together (plane measures only).
//!
//! The central quantity is the total squared curvature of a weighted atom
//! cloud: the sum of `menger(x,y,z)^2 · w_x w_y w_z` over ordered distinct
//! atom triples whose three pairwise distances all exceed a truncation
//! radius `eps`.  The Melnikov–Verdera identity says this triple sum, divided
//! by 6, equals the squared L²-norm of the eps-truncated Cauchy transform of
//! the measure up to an error term controlled by the measure's linear growth
//! constant; [`mv_identity`] reports both sides, their residual, and the
//! growth constant so the bound can be checked externally.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use rand_distr::weighted::WeightedAliasIndex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::{pairwise_sum, BallMass, DiscreteMeasure, Point};

/// Exact triple summation is refused above this atom count unless forced:
/// the loop is O(N³) and 5000 atoms already mean ~2·10¹⁰ triples.
pub const EXACT_ATOM_CAP: usize = 5000;

/// How a total-curvature value was produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CurvatureMode {
    /// Full deterministic sum over all separated triples.
    Exact,
    /// Monte-Carlo estimate: triples drawn proportional to their weight
    /// product via alias sampling, with the RNG seed recorded.
    Sampled { samples: u64, seed: u64 },
}

/// Total squared Menger curvature of a measure at one truncation radius.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurvatureReport {
    /// Total squared curvature over ordered distinct separated triples
    /// (an unbiased estimate of it in sampled mode).
    pub c2: f64,
    /// Truncation radius: a triple contributes only if all three pairwise
    /// distances exceed this value.
    pub eps: f64,
    pub mode: CurvatureMode,
    /// Exact mode: number of separated unordered triples evaluated.
    /// Sampled mode: number of triples drawn.
    pub triples_evaluated: u64,
    /// Triples encountered with a zero pairwise distance (distinct atom ids
    /// at coincident positions). Construction merges coincident atoms, so
    /// this stays 0 unless positions differ only in coordinate bit patterns.
    pub degenerate_triples: u64,
    /// Standard error of the estimate (sampled mode with ≥ 2 samples only).
    pub std_error: Option<f64>,
}

/// Both sides of the Melnikov–Verdera identity on one measure.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MVReport {
    /// ‖C_eps μ‖² in L²(μ): Σ_j w_j |C_eps μ(x_j)|², with the j-th transform
    /// excluding atoms within eps of x_j (consistent with the truncation).
    pub lhs: f64,
    /// Total squared curvature at the same truncation, divided by 6.
    pub rhs_curv: f64,
    /// lhs − rhs_curv; bounded by c′ · growth_const² · total_mass for an
    /// absolute constant c′.
    pub residual: f64,
    /// Smallest c₀ with μ(closed B(x, r)) ≤ c₀·r over all atom centers x and
    /// all event radii r (positive pairwise distances).
    pub growth_const: f64,
    pub eps: f64,
    pub total_mass: f64,
}

/// Menger curvature 1/R of a point triple: 4·Area/(|x−y|·|y−z|·|x−z|),
/// the reciprocal circumradius. Zero for collinear triples and, by
/// convention, for triples with coincident points (no curvature mass).
/// Symmetric under permutations of the arguments.
pub fn menger(x: &Point, y: &Point, z: &Point) -> f64 {
    menger_sides(x, y, z, x.dist(y), y.dist(z), x.dist(z))
}

/// `menger` with the three side lengths already computed.
fn menger_sides(x: &Point, y: &Point, z: &Point, dxy: f64, dyz: f64, dxz: f64) -> f64 {
    if dxy == 0.0 || dyz == 0.0 || dxz == 0.0 {
        return 0.0;
    }
    let area = if x.dim() == 2 {
        // Exact-cancellation cross product: collinear configurations whose
        // coordinates are exactly representable (e.g. axis-aligned lines)
        // give area 0.0 with no rounding residue.
        let (ux, uy) = (y.coords[0] - x.coords[0], y.coords[1] - x.coords[1]);
        let (vx, vy) = (z.coords[0] - x.coords[0], z.coords[1] - x.coords[1]);
        0.5 * cross2(ux, uy, vx, vy).abs()
    } else {
        // Points in a common plane of a higher-dimensional space: Heron's
        // formula in the stable arrangement (sides sorted descending).
        let mut s = [dxy, dyz, dxz];
        s.sort_unstable_by(|p, q| q.partial_cmp(p).unwrap());
        let [a, b, c] = s;
        let t = (c - (a - b)).max(0.0);
        0.25 * ((a + (b + c)) * t * (c + (a - b)) * (a + (b - c))).sqrt()
    };
    4.0 * area / (dxy * dyz * dxz)
}

/// ux·vy − uy·vx with a fused-multiply-add correction for the cancellation.
fn cross2(ux: f64, uy: f64, vx: f64, vy: f64) -> f64 {
    let w = uy * vx;
    let e = uy.mul_add(vx, -w);
    ux.mul_add(vy, -w) - e
}

/// Total squared Menger curvature of the measure with truncation `eps`.
///
/// Exact mode sums `menger²·w_i w_j w_k` over ordered distinct triples whose
/// three pairwise distances all exceed `eps` (computed over unordered triples
/// and scaled by 6). It refuses more than [`EXACT_ATOM_CAP`] atoms unless
/// `force` is set. Sampled mode draws index triples proportional to
/// `w_i w_j w_k` (three independent alias-table draws) and reports an
/// unbiased estimate with its standard error; draws that repeat an index or
/// violate the separation rule contribute zero, which is exactly their
/// weight in the target sum.
///
/// The triple loop is partitioned by leading index across workers and the
/// partial sums are merged in index order, so the total is bit-identical
/// across thread counts.
pub fn curvature_total(
    m: &DiscreteMeasure,
    eps: f64,
    mode: CurvatureMode,
    force: bool,
) -> Result<CurvatureReport> {
    if m.dim() != 2 {
        return Err(Error::DimMismatch { expected: 2, got: m.dim() });
    }
    if !eps.is_finite() || eps < 0.0 {
        return Err(Error::Precondition(format!(
            "truncation radius must be finite and nonnegative, got {eps}"
        )));
    }
    match mode {
        CurvatureMode::Exact => {
            let n = m.len();
            if n > EXACT_ATOM_CAP && !force {
                return Err(Error::TripleCountCap { n, limit: EXACT_ATOM_CAP });
            }
            let partials: Vec<(f64, u64, u64)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let xi = m.position(i);
                    let wi = m.weight(i);
                    let mut acc = 0.0;
                    let mut evaluated = 0u64;
                    let mut degenerate = 0u64;
                    for j in (i + 1)..n {
                        let xj = m.position(j);
                        let dij = xi.dist(xj);
                        if dij <= eps {
                            if dij == 0.0 {
                                degenerate += (n - j - 1) as u64;
                            }
                            continue;
                        }
                        let wij = wi * m.weight(j);
                        for k in (j + 1)..n {
                            let xk = m.position(k);
                            let dik = xi.dist(xk);
                            let djk = xj.dist(xk);
                            if dik == 0.0 || djk == 0.0 {
                                degenerate += 1;
                                continue;
                            }
                            if dik > eps && djk > eps {
                                let c = menger_sides(xi, xj, xk, dij, djk, dik);
                                acc += c * c * wij * m.weight(k);
                                evaluated += 1;
                            }
                        }
                    }
                    (acc, evaluated, degenerate)
                })
                .collect();
            let values: Vec<f64> = partials.iter().map(|p| p.0).collect();
            let c2 = 6.0 * pairwise_sum(&values);
            Ok(CurvatureReport {
                c2,
                eps,
                mode,
                triples_evaluated: partials.iter().map(|p| p.1).sum(),
                degenerate_triples: partials.iter().map(|p| p.2).sum(),
                std_error: None,
            })
        }
        CurvatureMode::Sampled { samples, seed } => {
            if samples == 0 {
                return Err(Error::Precondition("sampled mode needs at least one sample".into()));
            }
            let alias = WeightedAliasIndex::new(m.weights().to_vec()).map_err(|e| {
                Error::Precondition(format!("alias table construction failed: {e}"))
            })?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w3 = m.total_mass().powi(3);
            let mut mean = 0.0f64;
            let mut msq = 0.0f64;
            let mut degenerate = 0u64;
            for s in 0..samples {
                let i = alias.sample(&mut rng);
                let j = alias.sample(&mut rng);
                let k = alias.sample(&mut rng);
                let val = if i == j || j == k || i == k {
                    0.0
                } else {
                    let (xi, xj, xk) = (m.position(i), m.position(j), m.position(k));
                    let dij = xi.dist(xj);
                    let djk = xj.dist(xk);
                    let dik = xi.dist(xk);
                    if dij == 0.0 || djk == 0.0 || dik == 0.0 {
                        degenerate += 1;
                        0.0
                    } else if dij > eps && djk > eps && dik > eps {
                        let c = menger_sides(xi, xj, xk, dij, djk, dik);
                        c * c
                    } else {
                        0.0
                    }
                };
                // Welford update: sequential, so the estimate is reproducible
                // bit-for-bit from the seed.
                let delta = val - mean;
                mean += delta / (s + 1) as f64;
                msq += delta * (val - mean);
            }
            let std_error = if samples > 1 {
                Some(w3 * (msq / (samples - 1) as f64 / samples as f64).sqrt())
            } else {
                None
            };
            Ok(CurvatureReport {
                c2: w3 * mean,
                eps,
                mode,
                triples_evaluated: samples,
                degenerate_triples: degenerate,
                std_error,
            })
        }
    }
}

/// Truncated Cauchy transform of `f dμ` at `z`:
/// Σ over atoms with |z − x_j| > eps of `f_j w_j / (z − x_j)` in complex
/// arithmetic (the plane identified with ℂ). Atoms within `eps` of `z`,
/// including an atom at `z` itself, are excluded by the truncation.
pub fn cauchy_transform(
    m: &DiscreteMeasure,
    f: &[f64],
    z: &Point,
    eps: f64,
) -> Result<Complex64> {
    if m.dim() != 2 {
        return Err(Error::DimMismatch { expected: 2, got: m.dim() });
    }
    check_truncation_radius(eps)?;
    if f.len() != m.len() {
        return Err(Error::Precondition(format!(
            "per-atom factor length {} does not match atom count {}",
            f.len(),
            m.len()
        )));
    }
    if z.dim() != 2 {
        return Err(Error::DimMismatch { expected: 2, got: z.dim() });
    }
    Ok(cauchy_at(m, f, z, eps))
}

fn check_truncation_radius(eps: f64) -> Result<()> {
    if !eps.is_finite() || eps <= 0.0 {
        return Err(Error::Precondition(format!(
            "truncation radius must be finite and positive, got {eps}"
        )));
    }
    Ok(())
}

/// Unchecked single-point transform; separation uses the same metric code
/// path as the curvature triple sum so borderline atoms classify identically.
fn cauchy_at(m: &DiscreteMeasure, f: &[f64], z: &Point, eps: f64) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for j in 0..m.len() {
        let p = m.position(j);
        if z.dist(p) > eps {
            let dz = Complex64::new(z.coords[0] - p.coords[0], z.coords[1] - p.coords[1]);
            acc += (f[j] * m.weight(j)) / dz;
        }
    }
    acc
}

/// The transform of μ itself evaluated at every atom position, in atom order.
fn transforms_at_atoms(m: &DiscreteMeasure, eps: f64) -> Vec<Complex64> {
    let ones = vec![1.0f64; m.len()];
    (0..m.len())
        .into_par_iter()
        .map(|j| cauchy_at(m, &ones, m.position(j), eps))
        .collect()
}

/// Smallest c₀ with μ(closed B(x, r)) ≤ c₀·r over every atom center x and
/// every event radius r (positive pairwise distance). Between events the
/// ball mass is constant while r grows, so the supremum over all positive
/// radii is attained at an event radius.
pub fn linear_growth_constant(m: &DiscreteMeasure) -> f64 {
    let per_atom: Vec<f64> = (0..m.len())
        .into_par_iter()
        .map(|j| {
            let sd = m.sorted_distances(m.position(j));
            let mut acc = 0.0;
            let mut best: f64 = 0.0;
            let mut idx = 0;
            while idx < sd.len() {
                let r = sd[idx].0;
                // Closed ball: absorb every atom tied at this radius first.
                while idx < sd.len() && sd[idx].0 == r {
                    acc += m.weight(sd[idx].1);
                    idx += 1;
                }
                if r > 0.0 {
                    best = best.max(acc / r);
                }
            }
            best
        })
        .collect();
    per_atom.into_iter().fold(0.0, f64::max)
}

/// Evaluate both sides of the Melnikov–Verdera identity at truncation `eps`.
///
/// `lhs` is Σ_j w_j |C_eps μ(x_j)|² with the per-atom transforms computed in
/// parallel and reduced in atom order (bit-stable across thread counts);
/// `rhs_curv` is the exact total squared curvature divided by 6. The exact
/// triple sum honors the same [`EXACT_ATOM_CAP`]/`force` guard as
/// [`curvature_total`].
pub fn mv_identity(m: &DiscreteMeasure, eps: f64, force: bool) -> Result<MVReport> {
    if m.dim() != 2 {
        return Err(Error::DimMismatch { expected: 2, got: m.dim() });
    }
    check_truncation_radius(eps)?;
    let curv = curvature_total(m, eps, CurvatureMode::Exact, force)?;
    let cvals = transforms_at_atoms(m, eps);
    let terms: Vec<f64> = cvals
        .iter()
        .zip(m.weights())
        .map(|(c, w)| w * c.norm_sqr())
        .collect();
    let lhs = pairwise_sum(&terms);
    let rhs_curv = curv.c2 / 6.0;
    Ok(MVReport {
        lhs,
        rhs_curv,
        residual: lhs - rhs_curv,
        growth_const: linear_growth_constant(m),
        eps,
        total_mass: m.total_mass(),
    })
}

/// Σ_j w_j · C_eps μ(x_j), returned as a modulus. The pair (j, k) and its
/// swap contribute kernels of opposite sign, so the sum is exactly zero in
/// real arithmetic; the returned value is pure floating-point noise and
/// asserting it small checks the transform plumbing end to end.
pub fn energy_cancellation(m: &DiscreteMeasure, eps: f64) -> Result<f64> {
    if m.dim() != 2 {
        return Err(Error::DimMismatch { expected: 2, got: m.dim() });
    }
    check_truncation_radius(eps)?;
    let cvals = transforms_at_atoms(m, eps);
    let mut acc = Complex64::new(0.0, 0.0);
    for (j, c) in cvals.iter().enumerate() {
        acc += m.weight(j) * c;
    }
    Ok(acc.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::Ball;
    use proptest::prelude::*;
    use rand::Rng;

    fn pt(x: f64, y: f64) -> Point {
        Point::xy(x, y)
    }

    fn cloud(seed: u64, n: usize) -> DiscreteMeasure {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let atoms = (0..n)
            .map(|_| {
                (
                    pt(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                    rng.random_range(0.1..1.0),
                )
            })
            .collect();
        DiscreteMeasure::new(2, atoms).unwrap()
    }

    fn circle(n: usize, rho: f64, mass: f64) -> DiscreteMeasure {
        let w = mass / n as f64;
        let atoms = (0..n)
            .map(|k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                (pt(rho * t.cos(), rho * t.sin()), w)
            })
            .collect();
        DiscreteMeasure::new(2, atoms).unwrap()
    }

    // ---- Menger curvature closed forms -----------------------------------

    #[test]
    fn menger_collinear_is_exactly_zero() {
        assert_eq!(menger(&pt(0.0, 0.0), &pt(1.0, 0.0), &pt(3.0, 0.0)), 0.0);
        // Horizontal and vertical lines cancel exactly for any coordinates.
        assert_eq!(menger(&pt(0.137, 2.0), &pt(0.881, 2.0), &pt(-0.4441, 2.0)), 0.0);
        assert_eq!(menger(&pt(-0.3, 0.11), &pt(-0.3, 0.77), &pt(-0.3, -5.2)), 0.0);
        // The main diagonal cancels exactly as well.
        assert_eq!(menger(&pt(0.1, 0.1), &pt(0.73, 0.73), &pt(-2.5, -2.5)), 0.0);
    }

    #[test]
    fn menger_coincident_points_carry_no_curvature() {
        let a = pt(0.3, -0.2);
        assert_eq!(menger(&a, &a, &pt(1.0, 1.0)), 0.0);
        assert_eq!(menger(&a, &a, &a), 0.0);
    }

    #[test]
    fn menger_equilateral_is_sqrt3_over_side() {
        for s in [1.0, 0.7, 35.0] {
            let h = s * 3.0f64.sqrt() / 2.0;
            let got = menger(&pt(0.0, 0.0), &pt(s, 0.0), &pt(s / 2.0, h));
            let want = 3.0f64.sqrt() / s;
            assert!(
                (got - want).abs() <= 1e-14 * want,
                "side {s}: got {got}, want {want}"
            );
        }
    }

    #[test]
    fn menger_right_triangle_circumradius_is_half_hypotenuse() {
        // 3-4-5 triangle: the hypotenuse is a diameter, so R = 2.5.
        let got = menger(&pt(0.0, 0.0), &pt(3.0, 0.0), &pt(3.0, 4.0));
        assert!((got - 0.4).abs() <= 1e-15, "got {got}");
    }

    #[test]
    fn menger_heron_path_matches_planar_path() {
        // Same triangle evaluated through 2D cross-product area and through
        // the sorted Heron formula used for plane-embedded points.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let xs: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (x, y, z) = (pt(xs[0], xs[1]), pt(xs[2], xs[3]), pt(xs[4], xs[5]));
            let planar = menger(&x, &y, &z);
            let embed = |p: &Point| Point::new(vec![p.coords[0], p.coords[1], 0.0]).unwrap();
            let heron = menger(&embed(&x), &embed(&y), &embed(&z));
            let scale = planar.abs().max(1.0);
            assert!(
                (planar - heron).abs() <= 1e-9 * scale,
                "planar {planar} vs heron {heron}"
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn menger_is_permutation_symmetric(
            coords in proptest::array::uniform6(-10.0f64..10.0),
        ) {
            let x = pt(coords[0], coords[1]);
            let y = pt(coords[2], coords[3]);
            let z = pt(coords[4], coords[5]);
            let base = menger(&x, &y, &z);
            let perms = [
                menger(&x, &z, &y),
                menger(&y, &x, &z),
                menger(&y, &z, &x),
                menger(&z, &x, &y),
                menger(&z, &y, &x),
            ];
            for p in perms {
                prop_assert!((p - base).abs() <= 1e-12 * base.abs().max(1e-12),
                    "base {base}, perm {p}");
            }
        }

        #[test]
        fn menger_is_rigid_motion_invariant_and_scales_reciprocally(
            coords in proptest::array::uniform6(-5.0f64..5.0),
            theta in 0.0f64..std::f64::consts::TAU,
            tx in -3.0f64..3.0,
            ty in -3.0f64..3.0,
            lambda in 0.1f64..10.0,
        ) {
            let x = pt(coords[0], coords[1]);
            let y = pt(coords[2], coords[3]);
            let z = pt(coords[4], coords[5]);
            let base = menger(&x, &y, &z);
            let mv = |p: &Point| {
                let (c, s) = (theta.cos(), theta.sin());
                pt(c * p.coords[0] - s * p.coords[1] + tx,
                   s * p.coords[0] + c * p.coords[1] + ty)
            };
            let moved = menger(&mv(&x), &mv(&y), &mv(&z));
            prop_assert!((moved - base).abs() <= 1e-9 * base.abs().max(1e-9),
                "rigid motion changed curvature: {base} -> {moved}");
            let dil = |p: &Point| pt(lambda * p.coords[0], lambda * p.coords[1]);
            let scaled = menger(&dil(&x), &dil(&y), &dil(&z));
            prop_assert!((scaled - base / lambda).abs() <= 1e-9 * (base / lambda).abs().max(1e-9),
                "dilation by {lambda}: {base} -> {scaled}");
        }
    }

    // ---- Total curvature --------------------------------------------------

    #[test]
    fn collinear_cloud_has_exactly_zero_curvature() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let atoms: Vec<(Point, f64)> = (0..40)
            .map(|_| (pt(rng.random_range(-4.0..4.0), 0.25), rng.random_range(0.1..2.0)))
            .collect();
        let m = DiscreteMeasure::new(2, atoms).unwrap();
        let rep = curvature_total(&m, 0.0, CurvatureMode::Exact, false).unwrap();
        assert_eq!(rep.c2, 0.0);
        assert_eq!(rep.degenerate_triples, 0);
    }

    #[test]
    fn circle_curvature_matches_closed_form() {
        // Every triple on a circle of radius rho has circumradius rho, so the
        // ordered-triple sum collapses to a counting identity.
        let (n, rho, mass) = (64usize, 1.3f64, 2.0f64);
        let m = circle(n, rho, mass);
        let rep = curvature_total(&m, 0.0, CurvatureMode::Exact, false).unwrap();
        let nn = n as f64;
        let want = mass.powi(3) * (nn - 1.0) * (nn - 2.0) / (nn * nn * rho * rho);
        assert!(
            (rep.c2 - want).abs() <= 1e-12 * want,
            "got {}, want {want}",
            rep.c2
        );
        let triples = (n * (n - 1) * (n - 2) / 6) as u64;
        assert_eq!(rep.triples_evaluated, triples);
    }

    #[test]
    fn truncation_drops_tight_triples_monotonically() {
        let m = cloud(11, 60);
        // Sweep eps through the pairwise-distance range; each step can only
        // remove triples from the sum.
        let mut dists = Vec::new();
        for i in 0..m.len() {
            for j in (i + 1)..m.len() {
                dists.push(m.position(i).dist(m.position(j)));
            }
        }
        dists.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let picks = [
            0.0,
            dists[dists.len() / 10],
            dists[dists.len() / 3],
            dists[dists.len() / 2],
            dists[dists.len() * 9 / 10],
            dists[dists.len() - 1],
        ];
        let mut last = f64::INFINITY;
        let mut evaluated = u64::MAX;
        for eps in picks {
            let rep = curvature_total(&m, eps, CurvatureMode::Exact, false).unwrap();
            assert!(
                rep.c2 <= last * (1.0 + 1e-12) + 1e-300,
                "c2 rose from {last} to {} at eps {eps}",
                rep.c2
            );
            assert!(rep.triples_evaluated <= evaluated);
            last = rep.c2;
            evaluated = rep.triples_evaluated;
        }
        // The largest pairwise distance separates no triple at all.
        assert_eq!(last, 0.0);
        assert_eq!(evaluated, 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn curvature_scales_as_weight_cubed_over_length_squared(
            seed in 0u64..1000,
            lambda in 0.2f64..5.0,
            s in 0.2f64..5.0,
        ) {
            let m = cloud(seed, 14);
            let base = curvature_total(&m, 0.0, CurvatureMode::Exact, false).unwrap().c2;
            let atoms: Vec<(Point, f64)> = (0..m.len())
                .map(|i| {
                    let p = m.position(i);
                    (pt(lambda * p.coords[0], lambda * p.coords[1]), s * m.weight(i))
                })
                .collect();
            let md = DiscreteMeasure::new(2, atoms).unwrap();
            let got = curvature_total(&md, 0.0, CurvatureMode::Exact, false).unwrap().c2;
            let want = base * s.powi(3) / (lambda * lambda);
            prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1e-12),
                "scaling mismatch: got {got}, want {want}");
        }
    }

    #[test]
    fn exact_mode_refuses_oversized_clouds_unless_forced() {
        let atoms: Vec<(Point, f64)> = (0..5001)
            .map(|i| (pt(i as f64 * 1e-3, (i % 71) as f64), 1.0))
            .collect();
        let m = DiscreteMeasure::new(2, atoms).unwrap();
        let err = curvature_total(&m, 0.0, CurvatureMode::Exact, false).unwrap_err();
        assert!(matches!(err, Error::TripleCountCap { n: 5001, limit: EXACT_ATOM_CAP }));
        // Sampled mode handles the same cloud without the guard.
        let rep = curvature_total(
            &m,
            0.0,
            CurvatureMode::Sampled { samples: 10, seed: 1 },
            false,
        )
        .unwrap();
        assert!(rep.c2.is_finite());
    }

    #[test]
    fn exact_total_is_bit_stable_across_thread_counts() {
        let m = cloud(21, 80);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| curvature_total(&m, 0.05, CurvatureMode::Exact, false).unwrap().c2)
        };
        assert_eq!(run(1).to_bits(), run(4).to_bits());
    }

    #[test]
    fn sampled_estimate_is_reproducible_and_matches_exact_within_3_se() {
        let m = cloud(42, 300);
        let exact = curvature_total(&m, 0.01, CurvatureMode::Exact, false).unwrap();
        let mode = CurvatureMode::Sampled { samples: 1_000_000, seed: 0xDECAF };
        let a = curvature_total(&m, 0.01, mode, false).unwrap();
        let b = curvature_total(&m, 0.01, mode, false).unwrap();
        assert_eq!(a.c2.to_bits(), b.c2.to_bits(), "same seed must reproduce bits");
        let se = a.std_error.expect("sampled mode reports a standard error");
        assert!(se > 0.0);
        assert!(
            (a.c2 - exact.c2).abs() <= 3.0 * se,
            "estimate {} vs exact {} exceeds 3 standard errors ({se})",
            a.c2,
            exact.c2
        );
    }

    // ---- Cauchy transform --------------------------------------------------

    #[test]
    fn single_atom_on_the_right_gives_minus_weight() {
        let m = DiscreteMeasure::new(2, vec![(pt(1.0, 0.0), 0.7)]).unwrap();
        let v = cauchy_transform(&m, &[1.0], &pt(0.0, 0.0), 0.5).unwrap();
        assert_eq!(v, Complex64::new(-0.7, 0.0));
    }

    #[test]
    fn symmetric_pair_cancels_at_the_midpoint() {
        let m = DiscreteMeasure::new(
            2,
            vec![(pt(1.0, 0.0), 0.3), (pt(-1.0, 0.0), 0.3)],
        )
        .unwrap();
        let v = cauchy_transform(&m, &[1.0, 1.0], &pt(0.0, 0.0), 0.5).unwrap();
        assert_eq!(v, Complex64::new(0.0, 0.0));
    }

    #[test]
    fn atoms_inside_the_truncation_radius_are_excluded() {
        let m = DiscreteMeasure::new(
            2,
            vec![(pt(1.0, 0.0), 0.5), (pt(0.05, 0.0), 100.0)],
        )
        .unwrap();
        let v = cauchy_transform(&m, &[1.0, 1.0], &pt(0.0, 0.0), 0.1).unwrap();
        assert_eq!(v, Complex64::new(-0.5, 0.0));
    }

    #[test]
    fn transform_matches_independent_double_loop() {
        // Independent oracle: explicit real/imaginary kernel formula
        // w·(a, −b)/(a²+b²), summed naively.
        let m = cloud(7, 50);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f: Vec<f64> = (0..50).map(|_| rng.random_range(0.5..2.0)).collect();
        let eps = 0.08;
        for j in 0..m.len() {
            let z = m.position(j).clone();
            let got = cauchy_transform(&m, &f, &z, eps).unwrap();
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for k in 0..m.len() {
                let p = m.position(k);
                let a = z.coords[0] - p.coords[0];
                let b = z.coords[1] - p.coords[1];
                if (a * a + b * b).sqrt() > eps {
                    let d = a * a + b * b;
                    re += f[k] * m.weight(k) * a / d;
                    im += f[k] * m.weight(k) * (-b) / d;
                }
            }
            let scale = (re * re + im * im).sqrt().max(1.0);
            assert!(
                (got.re - re).abs() <= 1e-12 * scale && (got.im - im).abs() <= 1e-12 * scale,
                "atom {j}: got {got}, oracle ({re}, {im})"
            );
        }
    }

    // ---- Growth constant ---------------------------------------------------

    #[test]
    fn growth_constant_matches_brute_force_ball_scan() {
        let m = cloud(19, 35);
        let got = linear_growth_constant(&m);
        let mut want = 0.0f64;
        for j in 0..m.len() {
            for k in 0..m.len() {
                let r = m.position(j).dist(m.position(k));
                if r > 0.0 {
                    let b = Ball::new(m.position(j).clone(), r).unwrap();
                    want = want.max(m.ball_mass_brute(&b) / r);
                }
            }
        }
        assert!((got - want).abs() <= 1e-12 * want, "got {got}, want {want}");
    }

    // ---- Melnikov–Verdera identity ------------------------------------------

    #[test]
    fn single_atom_identity_is_degenerate_zero() {
        let m = DiscreteMeasure::new(2, vec![(pt(0.4, -1.0), 2.0)]).unwrap();
        let rep = mv_identity(&m, 0.1, false).unwrap();
        assert_eq!(rep.lhs, 0.0);
        assert_eq!(rep.rhs_curv, 0.0);
        assert_eq!(rep.residual, 0.0);
        assert_eq!(rep.growth_const, 0.0);
    }

    /// Independent algebraic expansion of the identity's error term.
    ///
    /// Expanding lhs = Σ_j w_j |Σ_k w_k/(x_j−x_k)|² over admissible k gives a
    /// diagonal part D = Σ_{j,k} w_j w_k²/|x_j−x_k|² plus the off-diagonal
    /// double sum of kernels 1/((x_j−x_k)·conj(x_j−x_l)). Summing that kernel
    /// over the six orderings of a fully separated triple reproduces the
    /// squared Menger curvature of the triple, so lhs − c²/6 must equal D
    /// plus the kernel sum over triples separated from the apex j but with
    /// |x_k−x_l| ≤ eps. Checking the reports against this expansion verifies
    /// lhs, the triple sum, and the truncation bookkeeping simultaneously.
    fn expansion_residual_oracle(m: &DiscreteMeasure, eps: f64) -> f64 {
        let n = m.len();
        let kernel = |j: usize, k: usize, l: usize| -> Complex64 {
            let (zj, zk, zl) = (m.position(j), m.position(k), m.position(l));
            let a = Complex64::new(zj.coords[0] - zk.coords[0], zj.coords[1] - zk.coords[1]);
            let b = Complex64::new(zj.coords[0] - zl.coords[0], zj.coords[1] - zl.coords[1]);
            Complex64::new(1.0, 0.0) / (a * b.conj())
        };
        let mut diag = 0.0f64;
        let mut missing = Complex64::new(0.0, 0.0);
        for j in 0..n {
            for k in 0..n {
                if k == j || m.position(j).dist(m.position(k)) <= eps {
                    continue;
                }
                let d = m.position(j).dist(m.position(k));
                diag += m.weight(j) * m.weight(k) * m.weight(k) / (d * d);
                for l in 0..n {
                    if l == j || l == k || m.position(j).dist(m.position(l)) <= eps {
                        continue;
                    }
                    if m.position(k).dist(m.position(l)) <= eps {
                        missing += m.weight(j) * m.weight(k) * m.weight(l) * kernel(j, k, l);
                    }
                }
            }
        }
        assert!(
            missing.im.abs() <= 1e-9 * missing.re.abs().max(1.0),
            "missing-triple kernel sum should be real, got {missing}"
        );
        diag + missing.re
    }

    #[test]
    fn residual_equals_algebraic_expansion() {
        for (seed, n, eps_frac) in [
            (1u64, 30usize, 0.05f64),
            (2, 45, 0.3),
            (3, 60, 0.8),
            (4, 25, 0.02),
        ] {
            let m = cloud(seed, n);
            let eps = eps_frac * m.diameter();
            let rep = mv_identity(&m, eps, false).unwrap();
            let want = expansion_residual_oracle(&m, eps);
            let scale = rep.lhs.abs().max(rep.rhs_curv.abs()).max(1.0);
            assert!(
                (rep.residual - want).abs() <= 1e-11 * scale,
                "seed {seed}: residual {} vs expansion {want}",
                rep.residual
            );
        }
    }

    /// Error-term constant, calibrated once and frozen. A sweep over circle,
    /// collinear, random-cloud, and dominant-atom measures at truncation
    /// radii from 0.5% to 100% of the diameter measured a worst ratio
    /// |residual|/(c₀²·mass) of 0.352 (collinear atoms at the tightest
    /// truncation); frozen here with ~2x headroom.
    const RESIDUAL_CONST: f64 = 0.75;

    #[test]
    fn circle_residual_is_bounded_by_growth_constant() {
        let m = circle(200, 1.0, 1.0);
        for eps in [0.01, 0.05, 0.2, 1.0] {
            let rep = mv_identity(&m, eps, false).unwrap();
            let bound = RESIDUAL_CONST * rep.growth_const * rep.growth_const * rep.total_mass;
            assert!(
                rep.residual.abs() <= bound,
                "eps {eps}: residual {} exceeds bound {bound}",
                rep.residual
            );
        }
    }

    #[test]
    fn collinear_residual_is_the_transform_energy() {
        let atoms: Vec<(Point, f64)> = (0..100)
            .map(|i| (pt(i as f64 * 0.01, -0.4), 0.01))
            .collect();
        let m = DiscreteMeasure::new(2, atoms).unwrap();
        for eps in [0.004, 0.015, 0.11] {
            let rep = mv_identity(&m, eps, false).unwrap();
            assert_eq!(rep.rhs_curv, 0.0, "collinear cloud has no curvature");
            assert_eq!(rep.residual, rep.lhs);
            assert!(rep.lhs >= 0.0);
            let bound = RESIDUAL_CONST * rep.growth_const * rep.growth_const * rep.total_mass;
            assert!(
                rep.residual <= bound,
                "eps {eps}: residual {} exceeds bound {bound}",
                rep.residual
            );
        }
    }

    #[test]
    fn lhs_is_invariant_under_relabeling_and_thread_count() {
        let m = cloud(33, 70);
        let eps = 0.07;
        let base = mv_identity(&m, eps, false).unwrap();
        // Relabel atoms with a fixed shuffle.
        let mut ids: Vec<usize> = (0..m.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in (1..ids.len()).rev() {
            ids.swap(i, rng.random_range(0..=i));
        }
        let atoms: Vec<(Point, f64)> =
            ids.iter().map(|&i| (m.position(i).clone(), m.weight(i))).collect();
        let shuffled = DiscreteMeasure::new(2, atoms).unwrap();
        let rep = mv_identity(&shuffled, eps, false).unwrap();
        assert!(
            (rep.lhs - base.lhs).abs() <= 1e-12 * base.lhs.max(1e-12),
            "relabeling moved lhs: {} vs {}",
            rep.lhs,
            base.lhs
        );
        // Identical atom order must give identical bits on any pool size.
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| mv_identity(&m, eps, false).unwrap().lhs)
        };
        assert_eq!(run(1).to_bits(), run(3).to_bits());
    }

    // ---- Energy cancellation -----------------------------------------------

    #[test]
    fn two_equal_atoms_cancel_exactly() {
        let m = DiscreteMeasure::new(
            2,
            vec![(pt(0.3, 0.9), 0.5), (pt(-1.1, 0.2), 0.5)],
        )
        .unwrap();
        assert_eq!(energy_cancellation(&m, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn pair_enumeration_oracle_cancels_and_bounds_the_cloud_value() {
        // Oracle: enumerate unordered pairs and add the two opposite kernel
        // terms with the weight product formed once; each pair cancels to
        // exactly zero, so the whole sum is exactly zero by construction.
        let m = cloud(55, 500);
        let eps = 0.05 * m.diameter();
        let mut oracle = Complex64::new(0.0, 0.0);
        for j in 0..m.len() {
            for k in (j + 1)..m.len() {
                let (zj, zk) = (m.position(j), m.position(k));
                if zj.dist(zk) > eps {
                    let p = m.weight(j) * m.weight(k);
                    let dz = Complex64::new(
                        zj.coords[0] - zk.coords[0],
                        zj.coords[1] - zk.coords[1],
                    );
                    oracle += p / dz;
                    oracle += p / (-dz);
                }
            }
        }
        assert_eq!(oracle, Complex64::new(0.0, 0.0));
        let val = energy_cancellation(&m, eps).unwrap();
        let scale = m.total_mass() * m.total_mass() / eps;
        assert!(val <= 1e-9 * scale, "energy {val} vs scale {scale}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn energy_cancellation_vanishes_on_random_clouds(
            seed in 0u64..10_000,
            n in 2usize..25,
            eps_frac in 0.01f64..0.5,
        ) {
            let m = cloud(seed, n);
            let eps = eps_frac * m.diameter();
            let val = energy_cancellation(&m, eps).unwrap();
            let scale = m.total_mass() * m.total_mass() / eps;
            prop_assert!(val <= 1e-10 * scale, "energy {val} vs scale {scale}");
        }
    }

    // ---- Preconditions -------------------------------------------------------

    #[test]
    fn wrong_dimension_and_bad_eps_are_rejected() {
        let m3 = DiscreteMeasure::new(
            3,
            vec![(Point::new(vec![0.0, 0.0, 0.0]).unwrap(), 1.0)],
        )
        .unwrap();
        assert!(matches!(
            curvature_total(&m3, 0.0, CurvatureMode::Exact, false),
            Err(Error::DimMismatch { expected: 2, got: 3 })
        ));
        let m = cloud(1, 5);
        assert!(curvature_total(&m, -1.0, CurvatureMode::Exact, false).is_err());
        assert!(mv_identity(&m, 0.0, false).is_err());
        assert!(energy_cancellation(&m, f64::NAN).is_err());
        assert!(cauchy_transform(&m, &[1.0; 4], &pt(0.0, 0.0), 0.1).is_err());
    }
}
