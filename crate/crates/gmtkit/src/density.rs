//! Multiscale density differences and square-function integrals.
//!
//! The central scalar is the density difference
//! `Δ(x, r) = |μ(B(x,r))/r − μ(B(x,2r))/(2r)|` and its `dr/r`-square
//! integral. For atomic measures `r ↦ μ(B(x,r))` is a right-continuous step
//! function with breakpoints at the atom distances `d_i`, so on any interval
//! free of events `{d_i} ∪ {d_i/2}` the masses at scales `r` and `2r` are
//! constant and the square integral has a closed form. The event sweep below
//! is the reference semantics; a geometric-grid midpoint rule is the fast
//! alternative.

use crate::error::{Error, Result};
use crate::measure::{pairwise_sum, theta, Ball, BallMass, DiscreteMeasure, Point};

/// Integration window `[r_min, r_max]`, `0 < r_min < r_max`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleRange {
    pub r_min: f64,
    pub r_max: f64,
}

impl ScaleRange {
    pub fn new(r_min: f64, r_max: f64) -> Result<Self> {
        if !(r_min > 0.0) || !(r_max > r_min) || !r_max.is_finite() {
            return Err(Error::InvalidRange(r_min, r_max));
        }
        Ok(ScaleRange { r_min, r_max })
    }
}

/// Quadrature mode for [`sqfn_integral`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SqfnMode {
    /// Event-sweep closed form; the oracle all tolerances anchor to.
    Exact,
    /// Geometric grid with `q` subdivisions per octave, midpoint rule in log r.
    Grid { q: u32 },
}

/// `|μ(B(x,r))/r − μ(B(x,2r))/(2r)|`.
pub fn delta<M: BallMass>(m: &M, x: &Point, r: f64) -> f64 {
    let b = Ball {
        center: x.clone(),
        radius: r,
    };
    (theta(m, &b) - m.ball_mass(&b.scaled(2.0)) / (2.0 * r)).abs()
}

/// Signed variant, the quantity the smooth comparison integrates against.
pub fn delta_signed<M: BallMass>(m: &M, x: &Point, r: f64) -> f64 {
    let b = Ball {
        center: x.clone(),
        radius: r,
    };
    theta(m, &b) - m.ball_mass(&b.scaled(2.0)) / (2.0 * r)
}

/// Radial mass profile of a measure seen from one point: distinct sorted
/// distances with cumulative weights, so `mass(B(x,r))` is a binary search.
#[derive(Clone, Debug)]
pub struct RadialProfile {
    /// Distinct atom distances from the query point, ascending.
    pub dist: Vec<f64>,
    /// `cum[i]` = total weight at distance `<= dist[i]`.
    pub cum: Vec<f64>,
}

impl RadialProfile {
    /// Profile of `Σ value_i · δ_{y_i}` from `x`; `values` defaults to the
    /// atom weights. Signed values are allowed (used by the localized
    /// transforms).
    pub fn new(m: &DiscreteMeasure, x: &Point, values: Option<&[f64]>) -> RadialProfile {
        let sorted = m.sorted_distances(x);
        Self::from_thresholds(
            sorted
                .into_iter()
                .map(|(d, id)| (d, values.map_or(m.weight(id), |f| f[id] * m.weight(id))))
                .collect(),
        )
    }

    /// Step profile from raw (threshold, value) pairs.
    fn from_thresholds(mut pairs: Vec<(f64, f64)>) -> RadialProfile {
        pairs.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut dist = Vec::with_capacity(pairs.len());
        let mut cum = Vec::with_capacity(pairs.len());
        let mut acc = 0.0;
        for (d, v) in pairs {
            acc += v;
            if dist.last() == Some(&d) {
                *cum.last_mut().unwrap() = acc;
            } else {
                dist.push(d);
                cum.push(acc);
            }
        }
        RadialProfile { dist, cum }
    }

    /// Total value at distance `<= r` (closed ball).
    pub fn mass_at(&self, r: f64) -> f64 {
        let k = self.dist.partition_point(|&d| d <= r);
        if k == 0 {
            0.0
        } else {
            self.cum[k - 1]
        }
    }

    /// Event radii `{d_i} ∪ {d_i/2}` strictly inside `(lo, hi)`, sorted,
    /// deduplicated, with `lo` and `hi` prepended/appended.
    fn events_in(&self, lo: f64, hi: f64) -> Vec<f64> {
        let mut evs = Vec::with_capacity(2 * self.dist.len() + 2);
        evs.push(lo);
        for &d in &self.dist {
            for e in [d, 0.5 * d] {
                if e > lo && e < hi {
                    evs.push(e);
                }
            }
        }
        evs.push(hi);
        evs.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        evs.dedup();
        evs
    }

    /// `∫_lo^hi (A(r)/r^n − B(r)/(2r)^n)^2 dr/r` where `A(r)` is the profile
    /// mass at scale `r` and `B(r)` at scale `2r`. Closed form per event
    /// interval: the masses are constant, so the integrand is
    /// `(A − B/2^n)^2 r^{-2n-1}`.
    pub fn square_integral(&self, n: u32, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        let evs = self.events_in(lo, hi);
        let two_n = 2.0 * n as f64;
        let half_pow = 0.5f64.powi(n as i32);
        let mut total = 0.0;
        for w in evs.windows(2) {
            let (u, v) = (w[0], w[1]);
            let a = self.mass_at(u);
            let b = self.mass_at(2.0 * u);
            let c = a - half_pow * b;
            if c != 0.0 {
                total += c * c * (u.powi(-2 * n as i32) - v.powi(-2 * n as i32)) / two_n;
            }
        }
        total
    }

    /// Midpoint rule in log r on a geometric grid with `q` cells per octave.
    pub fn square_integral_grid(&self, n: u32, lo: f64, hi: f64, q: u32) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        let half_pow = 0.5f64.powi(n as i32);
        let mut total = 0.0;
        let mut k = 0u64;
        loop {
            let r0 = lo * 2f64.powf(k as f64 / q as f64);
            if r0 >= hi {
                break;
            }
            let r1 = (lo * 2f64.powf((k + 1) as f64 / q as f64)).min(hi);
            let mid = (r0 * r1).sqrt();
            let d = (self.mass_at(mid) - half_pow * self.mass_at(2.0 * mid)) / mid.powi(n as i32);
            total += d * d * (r1 / r0).ln();
            k += 1;
        }
        total
    }
}

/// `∫_{r_min}^{r_max} Δ(x,r)^2 dr/r`.
pub fn sqfn_integral(m: &DiscreteMeasure, x: &Point, range: &ScaleRange, mode: SqfnMode) -> f64 {
    let profile = RadialProfile::new(m, x, None);
    match mode {
        SqfnMode::Exact => profile.square_integral(1, range.r_min, range.r_max),
        SqfnMode::Grid { q } => profile.square_integral_grid(1, range.r_min, range.r_max, q.max(1)),
    }
}

/// Localized n-dimensional transform
/// `( ∫ |(fμ)(B(x,r))/r^n − (fμ)(B(x,2r))/(2r)^n|^2 dr/r )^{1/2}` over
/// `[max(trunc, r_min), r_max]`, by exact event sweep. With `f ≡ 1`, `n = 1`,
/// `trunc = 0` this is the square root of [`sqfn_integral`].
pub fn t_transform(
    m: &DiscreteMeasure,
    f: &[f64],
    x: &Point,
    n: u32,
    trunc: f64,
    range: &ScaleRange,
) -> Result<f64> {
    if f.len() != m.len() {
        return Err(Error::Precondition(format!(
            "per-atom weights length {} != atom count {}",
            f.len(),
            m.len()
        )));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("per-atom weights must be finite".into()));
    }
    if !(trunc >= 0.0) {
        return Err(Error::Precondition(format!("trunc must be >= 0, got {trunc}")));
    }
    if n == 0 {
        return Err(Error::Precondition("n must be >= 1".into()));
    }
    let lo = trunc.max(range.r_min);
    if lo >= range.r_max {
        return Ok(0.0);
    }
    let profile = RadialProfile::new(m, x, Some(f));
    Ok(profile.square_integral(n, lo, range.r_max).sqrt())
}

/// Which maximal operator to evaluate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaximalKind {
    /// `sup_{r > ell} μ(B(x,2r))^{-1} ∫_{B(x,r)} |f| dμ`.
    Ratio,
    /// `sup_{r > ell} r^{-n} ∫_{B(x,r)} |f| dμ`.
    Power(u32),
}

/// Maximal operator over radii `r > ell`.
///
/// Both step functions of `r` are constant between consecutive events
/// `{d_i} ∪ {d_i/2}`, so the supremum is a maximum over pieces, evaluated at
/// each piece's left end. A divergent power-kind supremum (mass sitting at
/// `x` itself with `ell = 0`) is truncated to the smallest positive event
/// radius; if none exists the result is 0. Ratio pieces with zero
/// denominator carry zero numerator and are skipped.
pub fn maximal_op(
    m: &DiscreteMeasure,
    f: &[f64],
    x: &Point,
    ell: f64,
    kind: MaximalKind,
) -> Result<f64> {
    if f.len() != m.len() {
        return Err(Error::Precondition(format!(
            "per-atom weights length {} != atom count {}",
            f.len(),
            m.len()
        )));
    }
    if !(ell >= 0.0) || !ell.is_finite() {
        return Err(Error::Precondition(format!("ell must be finite and >= 0, got {ell}")));
    }
    if let MaximalKind::Power(0) = kind {
        return Err(Error::Precondition("power kind needs n >= 1".into()));
    }
    let abs_f: Vec<f64> = f.iter().map(|v| v.abs()).collect();
    let num = RadialProfile::new(m, x, Some(&abs_f));
    let den = RadialProfile::new(m, x, None);

    // Piece left ends: ell itself (open, value as r -> ell+) when ell > 0,
    // then every event radius above ell.
    let mut lefts: Vec<(f64, bool)> = Vec::new();
    if ell > 0.0 {
        lefts.push((ell, false));
    }
    let mut evs: Vec<f64> = num
        .dist
        .iter()
        .flat_map(|&d| [d, 0.5 * d])
        .filter(|&e| e > ell)
        .collect();
    evs.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    evs.dedup();
    lefts.extend(evs.into_iter().map(|e| (e, true)));

    let mut best = 0.0f64;
    for (r, _attained) in lefts {
        let numerator = num.mass_at(r);
        let val = match kind {
            MaximalKind::Ratio => {
                let d = den.mass_at(2.0 * r);
                if d > 0.0 {
                    numerator / d
                } else {
                    continue;
                }
            }
            MaximalKind::Power(n) => numerator / r.powi(n as i32),
        };
        if val > best {
            best = val;
        }
    }
    Ok(best)
}

/// Outcome pair for the density-doubling implication: a small square-function
/// mass on `[r/2, 2r]` forces `μ(B(x,2r)) ≤ 9 μ(B(x,r))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DoublingCheck {
    pub hypothesis_holds: bool,
    pub conclusion_holds: bool,
}

/// Evaluates both sides of the implication
/// `∫_{r/2}^{2r} Δ(x,t)^2 dt/t ≤ Θ(B(x,r))^2/200  ⇒  μ(B(x,2r)) ≤ 9 μ(B(x,r))`
/// with exact integrals. Requires `μ(B(x, r/2)) > 0`.
pub fn check_doubling_implication(m: &DiscreteMeasure, x: &Point, r: f64) -> Result<DoublingCheck> {
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::InvalidBall(r));
    }
    let profile = RadialProfile::new(m, x, None);
    if profile.mass_at(0.5 * r) <= 0.0 {
        return Err(Error::Precondition(format!(
            "doubling check needs μ(B(x, r/2)) > 0 at r = {r}"
        )));
    }
    let integral = profile.square_integral(1, 0.5 * r, 2.0 * r);
    let theta_r = profile.mass_at(r) / r;
    Ok(DoublingCheck {
        hypothesis_holds: integral <= theta_r * theta_r / 200.0,
        conclusion_holds: profile.mass_at(2.0 * r) <= 9.0 * profile.mass_at(r),
    })
}

/// Polynomial in a local variable `u ∈ [0,1]`, dense monomial coefficients.
#[derive(Clone, Debug)]
struct Poly(Vec<f64>);

impl Poly {
    fn eval(&self, u: f64) -> f64 {
        self.0.iter().rev().fold(0.0, |acc, c| acc * u + c)
    }

    fn deriv(&self) -> Poly {
        Poly(
            self.0
                .iter()
                .enumerate()
                .skip(1)
                .map(|(k, c)| k as f64 * c)
                .collect(),
        )
    }

    fn mul(&self, other: &Poly) -> Poly {
        let mut out = vec![0.0; self.0.len() + other.0.len() - 1];
        for (i, a) in self.0.iter().enumerate() {
            for (j, b) in other.0.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Poly(out)
    }

    /// `∫_0^1 p(u) du`, exact.
    fn integral_unit(&self) -> f64 {
        self.0
            .iter()
            .enumerate()
            .map(|(k, c)| c / (k as f64 + 1.0))
            .sum()
    }
}

/// C² piecewise-quintic radial profile `φ: [0,∞) → [0,1]`: constant 1 on
/// `[0, 1/2]`, a quintic-smoothstep ramp down to 0 at the support end
/// `s ∈ {1, 2}`, zero beyond. Monotone nonincreasing.
#[derive(Clone, Debug)]
pub struct SmoothProfile {
    /// Ramp start (always 1/2) and support end `s`.
    ramp: (f64, f64),
    /// Ramp polynomial in the local variable `u = (t - 1/2)/(s - 1/2)`.
    poly: Poly,
}

impl SmoothProfile {
    /// Profile supported in `[0, s]`; `s` must be 1 or 2.
    pub fn with_support(s: f64) -> Result<Self> {
        if s != 1.0 && s != 2.0 {
            return Err(Error::Precondition(format!(
                "profile support must be 1 or 2, got {s}"
            )));
        }
        // 1 - (10u^3 - 15u^4 + 6u^5): value 1, slope 0, curvature 0 at u=0;
        // all zero at u=1.
        Ok(SmoothProfile {
            ramp: (0.5, s),
            poly: Poly(vec![1.0, 0.0, 0.0, -10.0, 15.0, -6.0]),
        })
    }

    /// The wide variant: support `[0, 2]`.
    pub fn standard() -> Self {
        SmoothProfile::with_support(2.0).unwrap()
    }

    pub fn support(&self) -> f64 {
        self.ramp.1
    }

    pub fn eval(&self, t: f64) -> f64 {
        let (a, s) = self.ramp;
        if t <= a {
            1.0
        } else if t >= s {
            0.0
        } else {
            self.poly.eval((t - a) / (s - a))
        }
    }

    pub fn deriv(&self, t: f64) -> f64 {
        let (a, s) = self.ramp;
        if t <= a || t >= s {
            0.0
        } else {
            self.poly.deriv().eval((t - a) / (s - a)) / (s - a)
        }
    }

    /// `φ_t(v) = (1/t) φ(|v|/t)` evaluated at `|v| = dist`.
    pub fn scaled(&self, dist: f64, t: f64) -> f64 {
        self.eval(dist / t) / t
    }

    /// Constant `c_φ` for the squared comparison
    /// `∫_{r₁}^{r₂} |Δ_φ|² dr/r ≤ c_φ ∫_{r₁/2}^{s·r₂} |Δ|² dr/r`,
    /// the sharper of the two Cauchy–Schwarz routes through the
    /// representation `Δ_φ(x,R) = −∫ t φ'(t) Δ(x,tR) dt`:
    /// `(∫|tφ'|dt)²` and `(s − 1/2)·∫|tφ'(t)|² dt`, both integrated exactly.
    pub fn c_quadratic(&self) -> f64 {
        let (a, s) = self.ramp;
        let h = s - a;
        // In local coordinates t = a + hu: t φ'(t) dt = (a + hu) p'(u) du,
        // the substitution jacobian cancelling the inner 1/h exactly.
        let affine = Poly(vec![a, h]);
        let t_dphi = affine.mul(&self.poly.deriv());
        // |φ'| = -φ' on the ramp (nonincreasing), so |tφ'| integrates the negation.
        let route1 = {
            let v = -t_dphi.integral_unit();
            v * v
        };
        let route2 = t_dphi.mul(&t_dphi).integral_unit();
        route1.min(route2)
    }
}

/// Smooth density difference
/// `Δ_φ(x,t) = Σ_j w_j (φ_t(y_j − x) − φ_{2t}(y_j − x))`, signed.
pub fn delta_smooth(m: &DiscreteMeasure, phi: &SmoothProfile, x: &Point, t: f64) -> f64 {
    let reach = 2.0 * t * phi.support();
    let ids = m.atoms_in_ball(&Ball {
        center: x.clone(),
        radius: reach,
    });
    let terms: Vec<f64> = ids
        .iter()
        .map(|&i| {
            let d = m.position(i).dist(x);
            m.weight(i) * (phi.scaled(d, t) - phi.scaled(d, 2.0 * t))
        })
        .collect();
    pairwise_sum(&terms)
}

/// Exact evaluation of the representation
/// `−∫ t φ'(t) Δ_signed(x, tR) dt`: the integrand is a polynomial times a
/// step function of `t`, so each event-free interval contributes
/// `(a − b/2)(φ(t₁) − φ(t₂))/R` in closed form. Independent route to
/// [`delta_smooth`]; also the backbone of the smooth-vs-raw comparison tests.
pub fn delta_smooth_by_representation(
    m: &DiscreteMeasure,
    phi: &SmoothProfile,
    x: &Point,
    r: f64,
) -> f64 {
    // Work entirely in the t domain: the step thresholds t = d/r and
    // t = d/(2r) double as interval endpoints, so mass lookups and event
    // locations share the same rounded values.
    let mut at_scale = Vec::with_capacity(m.len());
    let mut at_double = Vec::with_capacity(m.len());
    for i in 0..m.len() {
        let d = m.position(i).dist(x);
        at_scale.push((d / r, m.weight(i)));
        at_double.push((d / (2.0 * r), m.weight(i)));
    }
    let ta = RadialProfile::from_thresholds(at_scale);
    let tb = RadialProfile::from_thresholds(at_double);
    let (lo, hi) = (0.5, phi.support());
    let mut ts: Vec<f64> = vec![lo, hi];
    ts.extend(ta.dist.iter().chain(tb.dist.iter()).copied().filter(|&e| e > lo && e < hi));
    ts.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    ts.dedup();
    let mut total = 0.0;
    for w in ts.windows(2) {
        let (t1, t2) = (w[0], w[1]);
        let a = ta.mass_at(t1);
        let b = tb.mass_at(t1);
        total += (a - 0.5 * b) / r * (phi.eval(t1) - phi.eval(t2));
    }
    total
}
