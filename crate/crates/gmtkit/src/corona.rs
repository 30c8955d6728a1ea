//! Stopping-time (corona-type) decomposition of a lattice cell.
//!
//! Starting from a root cell `R`, every descendant is classified against
//! five terminal conditions, evaluated with exact ball masses and
//! closed-form square-function integrals:
//!
//! * **BCF** — big complement of the reference subset `F`: the cell (or one
//!   of its dilated balls) carries too much mass outside `F`,
//! * **LD** — low density: `Θ(1.1B_Q) ≤ τ·Θ(B_R)`,
//! * **HD** — high density: `Θ(1.1B_Q) ≥ A·Θ(1.1B_R)`,
//! * **BCG** — big complement of the good-scales set: too much nearby mass
//!   fails the flatness window test of [`g_membership`],
//! * **BSD** — big sum of density differences: the chain of normalized
//!   square-function masses from the cell up to `R` is large.
//!
//! Maximal flagged cells form `Term`. The regularization radius
//! [`d_function`] — distance to the surviving ("good") cells plus their side
//! length — converts `Term` into the pairwise-disjoint family `Reg` whose
//! members have comparable side lengths wherever they are close. `Stop`
//! restricts `Reg` to descendants of `R`, and `Tree` keeps the cells of
//! `D(R)` not strictly inside any `Stop` cell. Iterating the decomposition
//! through maximal doubling cells yields generations of top cells
//! ([`top_iteration`]) whose density-weighted masses are compared against
//! the square-function mass of the measure ([`packing_report`]).
//!
//! Parameter regime: the classical ordering `η < δ < τ < 1/A < 1/K < 1` is
//! asymptotic; on an atomic measure the windows it prescribes descend below
//! the atom spacing, where density ratios are dominated by discretization.
//! Violations are therefore surfaced as warnings rather than errors, and the
//! tests run in honest finite regimes with the warnings recorded.

use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::Serialize;

use crate::density::RadialProfile;
use crate::error::{Error, Result};
use crate::lattice::{Cell, Lattice};
use crate::measure::{pairwise_sum, theta, Ball, BallMass, DiscreteMeasure, Point};

/// Thresholds for the stopping-time decomposition.
///
/// `delta` sets the scale windows (integrals run over
/// `[δ·ℓ(Q), δ⁻¹·ℓ(Q)]` and dilations reach `δ^{-1/2}`), `eta` the
/// square-function thresholds, `tau` the low-density cutoff, `a_const` the
/// high-density cutoff, `k_const` the working-window dilation, and
/// `m_const` a comparability constant carried to downstream consumers of
/// the stop cells (it does not enter the classification).
#[derive(Clone, Debug, Serialize)]
pub struct CoronaParams {
    pub delta: f64,
    pub eta: f64,
    pub tau: f64,
    /// High-density factor `A`.
    pub a_const: f64,
    /// Window dilation factor `K`.
    pub k_const: f64,
    /// Comparability constant `M` for downstream density floors.
    pub m_const: f64,
    /// Reference atom-id subset `F`; `None` means all atoms, which makes
    /// the BCF condition vacuous.
    pub f_subset: Option<Vec<usize>>,
}

impl CoronaParams {
    /// All six thresholds must be positive and finite.
    pub fn new(
        delta: f64,
        eta: f64,
        tau: f64,
        a_const: f64,
        k_const: f64,
        m_const: f64,
    ) -> Result<Self> {
        let p = CoronaParams {
            delta,
            eta,
            tau,
            a_const,
            k_const,
            m_const,
            f_subset: None,
        };
        p.validate()?;
        Ok(p)
    }

    /// Same thresholds with a reference subset `F` (atom ids, any order).
    pub fn with_f(mut self, ids: Vec<usize>) -> Self {
        self.f_subset = Some(ids);
        self
    }

    pub(crate) fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("delta", self.delta),
            ("eta", self.eta),
            ("tau", self.tau),
            ("A", self.a_const),
            ("K", self.k_const),
            ("M", self.m_const),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Precondition(format!(
                    "corona parameter {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Violations of the classical ordering `η < δ < τ < 1/A < 1/K < 1`,
    /// one message per broken link. Advisory only.
    pub fn ordering_warnings(&self) -> Vec<String> {
        let chain = [
            ("eta", self.eta),
            ("delta", self.delta),
            ("tau", self.tau),
            ("1/A", 1.0 / self.a_const),
            ("1/K", 1.0 / self.k_const),
            ("1", 1.0),
        ];
        let mut out = Vec::new();
        for w in chain.windows(2) {
            if !(w[0].1 < w[1].1) {
                out.push(format!(
                    "parameter ordering violated: {} = {} is not below {} = {}",
                    w[0].0, w[0].1, w[1].0, w[1].1
                ));
            }
        }
        out
    }
}

/// Classification of one cell. `Good` means no terminal condition fired.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Label {
    Good,
    /// Big complement of the reference subset `F`.
    #[serde(rename = "BCF")]
    Bcf,
    /// Low density.
    #[serde(rename = "LD")]
    Ld,
    /// High density.
    #[serde(rename = "HD")]
    Hd,
    /// Big complement of the good-scales set.
    #[serde(rename = "BCG")]
    Bcg,
    /// Big sum of density differences along the ancestor chain.
    #[serde(rename = "BSD")]
    Bsd,
}

/// Label of one descendant cell.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CellLabel {
    pub cell: usize,
    pub label: Label,
}

/// Measured regularity of one `Reg` cell: over the atoms within
/// `50·ℓ(P)` of its center, the ratio `d(x)/ℓ(P)` stays in
/// `[10, 50 + 61·A0]` (both ends provable from the construction; the
/// observed extremes and the bound are recorded).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RegDiagnostic {
    pub cell: usize,
    /// Atoms sampled (those within `50·ℓ(P)` of the cell center).
    pub samples: usize,
    /// Smallest observed `d(x)/ℓ(P)`.
    pub min_ratio: f64,
    /// Largest observed `d(x)/ℓ(P)`.
    pub max_ratio: f64,
    /// The provable ceiling `50 + 61·A0` for `max_ratio`.
    pub bound: f64,
}

/// Per-tree packing statistics (report columns; nothing is asserted here).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TreePacking {
    /// `Θ(2B_R)²·μ(R)`.
    pub root_density: f64,
    /// `Σ_{Q ∈ Stop} Θ(1.1B_Q)²·μ(Q)`.
    pub stop_density_sum: f64,
    /// `Σ_{Q ∈ Tree} Σ_{x ∈ δ⁻¹B_Q ∩ F} w_x·∫_{δℓ(Q)}^{δ⁻¹ℓ(Q)} Δ(x,r)² dr/r`.
    pub tree_sqfn_sum: f64,
}

/// Result of one stopping-time decomposition.
#[derive(Clone, Debug, Serialize)]
pub struct CoronaTree {
    /// Root cell id `R`.
    pub root: usize,
    /// Label of every cell of `D(R)`, ascending by cell id.
    pub labels: Vec<CellLabel>,
    /// Maximal labeled cells (pairwise disjoint), ascending.
    pub term: Vec<usize>,
    /// Cells of `D(R)` inside the working window with no labeled
    /// ancestor-or-self: the family the regularization radius minimizes
    /// over, ascending.
    pub good: Vec<usize>,
    /// For each atom with positive regularization radius, the largest
    /// lattice cell containing it whose side length is at most `1/60` of
    /// the smallest radius over its atoms; deduplicated, ascending. May
    /// include cells outside `D(R)`.
    pub reg: Vec<usize>,
    /// `Reg ∩ D(R)`, ascending.
    pub stop: Vec<usize>,
    /// Cells of `D(R)` not strictly inside any `Stop` cell, ascending.
    pub tree: Vec<usize>,
    /// Regularity measurements, one per `Reg` cell.
    pub reg_diagnostics: Vec<RegDiagnostic>,
    /// Packing report columns for this tree.
    pub packing: TreePacking,
    /// Parameter-ordering and root-doubling advisories.
    pub warnings: Vec<String>,
}

impl CoronaTree {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("corona tree serializes")
    }
}

/// One generation of the top iteration.
#[derive(Clone, Debug, Serialize)]
pub struct TopGeneration {
    /// Cell ids, ascending.
    pub cells: Vec<usize>,
    /// `Σ Θ(2B_R)²·μ(R)` over the generation.
    pub density_sum: f64,
    /// Cells whose decomposition could not be built (with the reason);
    /// they contribute no children to the next generation.
    pub skipped: Vec<(usize, String)>,
}

/// Generations `Top_0, Top_1, …` of the iterated decomposition.
#[derive(Clone, Debug, Serialize)]
pub struct TopIteration {
    pub generations: Vec<TopGeneration>,
}

impl TopIteration {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("top iteration serializes")
    }
}

/// Packing comparison: density-weighted mass of all top cells against the
/// square-function mass of the measure.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PackingReport {
    /// `Σ_{R ∈ Top} Θ(2B_R)²·μ(R)`.
    pub lhs: f64,
    /// `2·Θ(2B_{R₀})²·μ(R₀)`.
    pub root_term: f64,
    /// `Σ_{x ∈ F} w_x·∫_{r_lo}^{r_hi} Δ(x,r)² dr/r`.
    pub sqfn_term: f64,
    /// `root_term + sqfn_term`.
    pub rhs: f64,
    /// `lhs / rhs`; the comparison constant is not pinned by theory, so
    /// this is a bounded-ratio diagnostic, not an asserted inequality.
    pub ratio: f64,
    /// Lower integration limit: `δ ×` the smallest nearest-neighbor
    /// distance between atoms — the finest scale the measure resolves. An
    /// unbounded lower limit diverges on atomic measures, and tying the
    /// window to the measure (not the lattice) keeps reports comparable
    /// across lattice depths.
    pub r_lo: f64,
    /// Upper integration limit: `δ⁻¹ ×` the support diameter.
    pub r_hi: f64,
}

/// The two sides of the density-domination inequality checked by
/// [`sqfn_domination_check`].
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SqfnDomination {
    /// Whether the mass near the cell that fails the window test exceeds
    /// `η ×` the cell's `F`-mass (the hypothesis under which the
    /// inequality is guaranteed).
    pub hypothesis: bool,
    /// `Θ(2B_R)²·μ(R ∩ F)`.
    pub density_term: f64,
    /// `η⁻²·Σ_{x ∈ δ⁻¹B_R ∩ F} w_x·∫_{δℓ(R)}^{δ⁻¹ℓ(R)} Δ(x,r)² dr/r`.
    pub sqfn_term: f64,
    /// Mass of `δ⁻¹B_R ∩ F` failing the window test.
    pub failing_mass: f64,
    /// `μ(R ∩ F)`.
    pub cell_f_mass: f64,
}

/// `B_Q`: the cell's carrier ball `B(z_Q, 28·r_Q)` of radius `ℓ(Q)/2`.
fn cell_ball(c: &Cell) -> Ball {
    Ball {
        center: c.z.clone(),
        radius: 28.0 * c.r,
    }
}

/// Shared immutable state for one decomposition: the reference subset as a
/// mask and the lazily built radial profiles (one exact event backbone per
/// atom, reused by every window integral).
struct Ctx<'a> {
    m: &'a DiscreteMeasure,
    lat: &'a Lattice,
    p: &'a CoronaParams,
    /// `in_f[i]` iff atom `i` belongs to `F`; `None` when `F` is all atoms.
    in_f: Option<Vec<bool>>,
    profiles: Vec<OnceLock<RadialProfile>>,
}

impl<'a> Ctx<'a> {
    fn new(m: &'a DiscreteMeasure, lat: &'a Lattice, p: &'a CoronaParams) -> Result<Ctx<'a>> {
        p.validate()?;
        let in_f = match &p.f_subset {
            None => None,
            Some(ids) => {
                let mut mask = vec![false; m.len()];
                for &i in ids {
                    if i >= m.len() {
                        return Err(Error::Precondition(format!(
                            "F contains atom id {i} but the measure has {} atoms",
                            m.len()
                        )));
                    }
                    mask[i] = true;
                }
                Some(mask)
            }
        };
        Ok(Ctx {
            m,
            lat,
            p,
            in_f,
            profiles: (0..m.len()).map(|_| OnceLock::new()).collect(),
        })
    }

    fn profile(&self, i: usize) -> &RadialProfile {
        self.profiles[i].get_or_init(|| RadialProfile::new(self.m, self.m.position(i), None))
    }

    /// `∫_lo^hi Δ(x_i, r)² dr/r`, exact; zero when the window is empty.
    fn sq_window(&self, i: usize, lo: f64, hi: f64) -> f64 {
        self.profile(i).square_integral(1, lo, hi)
    }

    fn atom_in_f(&self, i: usize) -> bool {
        self.in_f.as_ref().map_or(true, |mask| mask[i])
    }

    fn ell(&self, c: &Cell) -> f64 {
        self.lat.side_length(c.level)
    }

    /// `μ(Q)` as the exact sum of the cell's atom weights.
    fn cell_mass(&self, c: &Cell) -> f64 {
        let ws: Vec<f64> = c.atom_ids.iter().map(|&i| self.m.weight(i)).collect();
        pairwise_sum(&ws)
    }

    /// `μ(Q ∩ F)`.
    fn cell_f_mass(&self, c: &Cell) -> f64 {
        let ws: Vec<f64> = c
            .atom_ids
            .iter()
            .filter(|&&i| self.atom_in_f(i))
            .map(|&i| self.m.weight(i))
            .collect();
        pairwise_sum(&ws)
    }

    /// Big complement of `F`: either the cell itself or one of its dilated
    /// balls `λB_Q`, `1.1 ≤ λ ≤ δ^{-1/2}`, holds an `η^{1/2}` fraction of
    /// mass outside `F`. The dilation sweep is exact: the mass ratio is a
    /// step function of `λ` changing only when an atom enters the closed
    /// ball, so it is evaluated at `λ = 1.1` and at every entry radius.
    fn is_bcf(&self, q: &Cell) -> bool {
        let Some(mask) = &self.in_f else {
            return false;
        };
        let eta_root = self.p.eta.sqrt();
        let mq = self.cell_mass(q);
        let mq_out = mq - self.cell_f_mass(q);
        if mq_out >= eta_root * mq {
            return true;
        }
        let lam_hi = 1.0 / self.p.delta.sqrt();
        if lam_hi < 1.1 {
            return false;
        }
        let rb = 28.0 * q.r;
        let sorted = self.m.sorted_distances(&q.z);
        let mut total = 0.0f64;
        let mut outside = 0.0f64;
        let mut k = 0;
        while k < sorted.len() && sorted[k].0 <= 1.1 * rb {
            total += self.m.weight(sorted[k].1);
            if !mask[sorted[k].1] {
                outside += self.m.weight(sorted[k].1);
            }
            k += 1;
        }
        if total > 0.0 && outside >= eta_root * total {
            return true;
        }
        while k < sorted.len() && sorted[k].0 <= lam_hi * rb {
            let d = sorted[k].0;
            while k < sorted.len() && sorted[k].0 == d {
                total += self.m.weight(sorted[k].1);
                if !mask[sorted[k].1] {
                    outside += self.m.weight(sorted[k].1);
                }
                k += 1;
            }
            if total > 0.0 && outside >= eta_root * total {
                return true;
            }
        }
        false
    }

    /// Big complement of the good-scales set: the mass of
    /// `δ^{-1/2}B_Q ∩ F` whose window integral over
    /// `[δ^{1/2}ℓ(Q), δ^{-1/2}ℓ(R)]` exceeds `η·Θ(2B_R)²` is at least an
    /// `η` fraction of all of `δ^{-1/2}B_Q ∩ F`.
    fn is_bcg(&self, q: &Cell, r: &Cell) -> bool {
        let root_delta = self.p.delta.sqrt();
        let lo = root_delta * self.ell(q);
        let hi = self.ell(r) / root_delta;
        let thr = self.p.eta * theta(self.m, &cell_ball(r).scaled(2.0)).powi(2);
        let big = Ball {
            center: q.z.clone(),
            radius: 28.0 * q.r / root_delta,
        };
        let mut tot = Vec::new();
        let mut bad = Vec::new();
        for i in self.m.atoms_in_ball(&big) {
            if !self.atom_in_f(i) {
                continue;
            }
            let w = self.m.weight(i);
            tot.push(w);
            let integral = self.sq_window(i, lo, hi);
            let in_g = if thr == 0.0 {
                integral == 0.0
            } else {
                integral <= thr
            };
            if !in_g {
                bad.push(w);
            }
        }
        let tot = pairwise_sum(&tot);
        tot > 0.0 && pairwise_sum(&bad) >= self.p.eta * tot
    }

    /// One ancestor's contribution to the chain sum of the BSD condition:
    /// `(1/μ(1.1B_P))·Σ_{x ∈ 1.1B_P ∩ F} w_x·∫_{δℓ(P)}^{δ⁻¹ℓ(P)} Δ(x,r)² dr/r`.
    fn bsd_term(&self, pc: &Cell) -> f64 {
        let ball = cell_ball(pc).scaled(1.1);
        let denom = self.m.ball_mass(&ball);
        let lo = self.p.delta * self.ell(pc);
        let hi = self.ell(pc) / self.p.delta;
        let terms: Vec<f64> = self
            .m
            .atoms_in_ball(&ball)
            .into_iter()
            .filter(|&i| self.atom_in_f(i))
            .map(|i| self.m.weight(i) * self.sq_window(i, lo, hi))
            .collect();
        pairwise_sum(&terms) / denom
    }

    /// First matching terminal label, given the precomputed BSD chain sum
    /// `Σ_{P: Q ⊆ P ⊆ R} bsd_term(P)`.
    fn label_with_chain(&self, q: &Cell, r: &Cell, bsd_chain: f64) -> Label {
        if self.is_bcf(q) {
            return Label::Bcf;
        }
        let theta_q = theta(self.m, &cell_ball(q).scaled(1.1));
        if theta_q <= self.p.tau * theta(self.m, &cell_ball(r)) {
            return Label::Ld;
        }
        if theta_q >= self.p.a_const * theta(self.m, &cell_ball(r).scaled(1.1)) {
            return Label::Hd;
        }
        if self.is_bcg(q, r) {
            return Label::Bcg;
        }
        if bsd_chain >= self.p.eta * theta(self.m, &cell_ball(r)).powi(2) {
            return Label::Bsd;
        }
        Label::Good
    }
}

/// Whether the point passes the flatness window test tied to the cell pair
/// `(q1, q2)`:
/// `∫_{δ·ℓ(q1)}^{δ⁻¹·ℓ(q2)} Δ(x,r)² dr/r ≤ η·Θ(2B_{q2})²`.
///
/// With `q1 == q2` this is the single-cell good-scales test. Requires
/// `ℓ(q1) ≤ ℓ(q2)` and a nonempty window; when `Θ(2B_{q2}) = 0` (possible
/// only for measures without an atom at the cell center, which the lattice
/// construction excludes) membership requires the integral to vanish.
pub fn g_membership(
    m: &DiscreteMeasure,
    lat: &Lattice,
    x: &Point,
    q1: usize,
    q2: usize,
    delta: f64,
    eta: f64,
) -> Result<bool> {
    if !(delta > 0.0) || !delta.is_finite() || !(eta >= 0.0) || !eta.is_finite() {
        return Err(Error::Precondition(format!(
            "g_membership needs delta > 0 and eta >= 0, got delta={delta}, eta={eta}"
        )));
    }
    let c1 = lat.cell(q1)?;
    let c2 = lat.cell(q2)?;
    let (l1, l2) = (lat.side_length(c1.level), lat.side_length(c2.level));
    if l1 > l2 {
        return Err(Error::Precondition(format!(
            "g_membership needs ell(q1) <= ell(q2), got {l1} > {l2}"
        )));
    }
    let (lo, hi) = (delta * l1, l2 / delta);
    if !(lo < hi) {
        return Err(Error::Precondition(format!(
            "empty scale window [{lo}, {hi}]: delta too large for this cell pair"
        )));
    }
    let integral = RadialProfile::new(m, x, None).square_integral(1, lo, hi);
    let thr = eta * theta(m, &cell_ball(c2).scaled(2.0)).powi(2);
    Ok(if thr == 0.0 {
        integral == 0.0
    } else {
        integral <= thr
    })
}

/// First matching terminal condition for `q` under the root `r`, in the
/// order BCF → LD → HD → BCG → BSD; [`Label::Good`] when none fires.
/// `q` must be a descendant of `r` (or `r` itself).
pub fn classify_cell(
    m: &DiscreteMeasure,
    lat: &Lattice,
    q: usize,
    r: usize,
    p: &CoronaParams,
) -> Result<Label> {
    let ctx = Ctx::new(m, lat, p)?;
    let qc = lat.cell(q)?;
    let rc = lat.cell(r)?;
    // Ancestor path r = p_0 ⊃ p_1 ⊃ … ⊃ p_k = q, for the chain sum and the
    // descendant check.
    let mut path = vec![q];
    let mut cur = qc;
    while cur.id != r {
        match cur.parent {
            Some(pid) => {
                path.push(pid);
                cur = lat.cell(pid)?;
            }
            None => {
                return Err(Error::Precondition(format!(
                    "cell {q} is not a descendant of cell {r}"
                )));
            }
        }
    }
    // Left fold from the root down, matching the prefix sums of build_tree
    // bit for bit.
    let mut chain = 0.0;
    for &pid in path.iter().rev() {
        chain += ctx.bsd_term(lat.cell(pid)?);
    }
    Ok(ctx.label_with_chain(qc, rc, chain))
}

/// Regularization radius: the minimum over the good cells of
/// `|x − z_Q| + ℓ(Q)`. A minimum of 1-Lipschitz functions, hence
/// 1-Lipschitz. Errors when `good_cells` is empty.
pub fn d_function(lat: &Lattice, x: &Point, good_cells: &[usize]) -> Result<f64> {
    if good_cells.is_empty() {
        return Err(Error::Precondition(
            "regularization radius needs a nonempty good family".into(),
        ));
    }
    let mut best = f64::INFINITY;
    for &id in good_cells {
        let c = lat.cell(id)?;
        let v = x.dist(&c.z) + lat.side_length(c.level);
        if v < best {
            best = v;
        }
    }
    Ok(best)
}

/// Atoms with regularization radius at most this are treated as already
/// lying on the good set (they generate no `Reg` cell). Absolute, so it
/// presumes inputs of roughly unit size, as all shipped generators are.
const W0_TOLERANCE: f64 = 1e-12;

/// Descendants of `r` (inclusive), parents before children.
fn descendants(lat: &Lattice, r: usize) -> Result<Vec<usize>> {
    let mut out = vec![r];
    let mut head = 0;
    while head < out.len() {
        let c = lat.cell(out[head])?;
        out.extend_from_slice(&c.children);
        head += 1;
    }
    Ok(out)
}

/// Builds the full decomposition under the root cell `r_id`: labels for
/// every descendant, the maximal terminal cells, the good family, the
/// regularized families `Reg`/`Stop`/`Tree`, regularity diagnostics, and
/// the per-tree packing columns.
///
/// Errors when the root itself satisfies a terminal condition (the good
/// family is then empty and no regularization radius exists). A
/// non-doubling root is legal but recorded as a warning.
pub fn build_tree(
    m: &DiscreteMeasure,
    lat: &Lattice,
    r_id: usize,
    p: &CoronaParams,
) -> Result<CoronaTree> {
    let ctx = Ctx::new(m, lat, p)?;
    let rc = lat.cell(r_id)?;
    let mut warnings = p.ordering_warnings();
    if !rc.doubling {
        warnings.push(format!("root cell {r_id} is not doubling"));
    }

    let dr = descendants(lat, r_id)?;
    let idx_of: HashMap<usize, usize> = dr.iter().enumerate().map(|(i, &id)| (id, i)).collect();

    // BSD chain prefix sums, parents before children.
    let s_vals: Vec<f64> = dr
        .par_iter()
        .map(|&id| ctx.bsd_term(lat.cell(id).expect("descendant id is valid")))
        .collect();
    let mut chain = vec![0.0f64; dr.len()];
    for (i, &id) in dr.iter().enumerate() {
        let c = lat.cell(id)?;
        chain[i] = match c.parent.and_then(|pid| idx_of.get(&pid)) {
            Some(&pi) => chain[pi] + s_vals[i],
            None => s_vals[i],
        };
    }

    // Classification, pure per cell.
    let labels_by_idx: Vec<Label> = dr
        .par_iter()
        .enumerate()
        .map(|(i, &id)| {
            let c = lat.cell(id).expect("descendant id is valid");
            ctx.label_with_chain(c, rc, chain[i])
        })
        .collect();

    // Maximal labeled cells, and the "covered by a terminal cell" flag.
    let mut covered = vec![false; dr.len()];
    let mut term = Vec::new();
    for (i, &id) in dr.iter().enumerate() {
        let c = lat.cell(id)?;
        let parent_covered = c
            .parent
            .and_then(|pid| idx_of.get(&pid))
            .map(|&pi| covered[pi])
            .unwrap_or(false);
        let labeled = labels_by_idx[i] != Label::Good;
        if labeled && !parent_covered {
            term.push(id);
        }
        covered[i] = parent_covered || labeled;
    }
    term.sort_unstable();

    // Good family: inside the working window, no terminal ancestor-or-self.
    let window = Ball {
        center: rc.z.clone(),
        radius: p.k_const * 28.0 * rc.r / 10.0,
    };
    let mut good = Vec::new();
    for (i, &id) in dr.iter().enumerate() {
        if covered[i] {
            continue;
        }
        let c = lat.cell(id)?;
        if c
            .atom_ids
            .iter()
            .all(|&a| m.position(a).dist(&window.center) <= window.radius)
        {
            good.push(id);
        }
    }
    good.sort_unstable();
    if good.is_empty() {
        return Err(Error::Precondition(format!(
            "no good cells under root {r_id}: the root itself satisfies a terminal condition"
        )));
    }

    // Regularization radius at every atom.
    let good_cells: Vec<(&Cell, f64)> = good
        .iter()
        .map(|&id| {
            let c = lat.cell(id).expect("good id is valid");
            (c, lat.side_length(c.level))
        })
        .collect();
    let d_at: Vec<f64> = (0..m.len())
        .into_par_iter()
        .map(|a| {
            let x = m.position(a);
            good_cells
                .iter()
                .map(|(c, l)| x.dist(&c.z) + l)
                .fold(f64::INFINITY, f64::min)
        })
        .collect();

    // Smallest radius over each lattice cell's atoms (whole lattice: the
    // regularized family may live outside D(R)).
    let min_d: Vec<f64> = lat
        .cells
        .iter()
        .map(|c| {
            c.atom_ids
                .iter()
                .map(|&a| d_at[a])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();

    // Reg: topmost cell on each atom's chain whose side length obeys the
    // 1/60 rule. The predicate is monotone along the chain (side lengths
    // shrink, the minimum radius grows), so the first hit is the largest.
    let mut reg_set = BTreeSet::new();
    let lattice_root = lat.root().id;
    for a in 0..m.len() {
        if d_at[a] <= W0_TOLERANCE {
            continue;
        }
        let mut cur = lat.cell(lattice_root)?;
        loop {
            if lat.side_length(cur.level) <= min_d[cur.id] / 60.0 {
                reg_set.insert(cur.id);
                break;
            }
            let next = cur
                .children
                .iter()
                .find(|&&ch| {
                    lat.cell(ch)
                        .map(|c| c.atom_ids.binary_search(&a).is_ok())
                        .unwrap_or(false)
                })
                .copied();
            match next {
                Some(ch) => cur = lat.cell(ch)?,
                None => break,
            }
        }
    }
    let reg: Vec<usize> = reg_set.iter().copied().collect();

    let stop: Vec<usize> = reg
        .iter()
        .copied()
        .filter(|id| idx_of.contains_key(id))
        .collect();

    // Tree: descendants not strictly inside a stop cell.
    let stop_set: BTreeSet<usize> = stop.iter().copied().collect();
    let mut under_stop = vec![false; dr.len()];
    for (i, &id) in dr.iter().enumerate() {
        let c = lat.cell(id)?;
        under_stop[i] = c
            .parent
            .and_then(|pid| idx_of.get(&pid))
            .map(|&pi| under_stop[pi] || stop_set.contains(&c.parent.unwrap()))
            .unwrap_or(false);
    }
    let mut tree: Vec<usize> = dr
        .iter()
        .enumerate()
        .filter(|(i, _)| !under_stop[*i])
        .map(|(_, &id)| id)
        .collect();
    tree.sort_unstable();

    // Regularity of each Reg cell over the atoms near its center.
    let reg_diagnostics: Vec<RegDiagnostic> = reg
        .iter()
        .map(|&id| {
            let c = lat.cell(id).expect("reg id is valid");
            let l = lat.side_length(c.level);
            let near = m.atoms_in_ball(&Ball {
                center: c.z.clone(),
                radius: 50.0 * l,
            });
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for &a in &near {
                let ratio = d_at[a] / l;
                lo = lo.min(ratio);
                hi = hi.max(ratio);
            }
            RegDiagnostic {
                cell: id,
                samples: near.len(),
                min_ratio: lo,
                max_ratio: hi,
                bound: 50.0 + 61.0 * lat.a0,
            }
        })
        .collect();

    // Packing columns.
    let root_density = theta(m, &cell_ball(rc).scaled(2.0)).powi(2) * ctx.cell_mass(rc);
    let stop_terms: Vec<f64> = stop
        .iter()
        .map(|&id| {
            let c = lat.cell(id).expect("stop id is valid");
            theta(m, &cell_ball(c).scaled(1.1)).powi(2) * ctx.cell_mass(c)
        })
        .collect();
    let tree_terms: Vec<f64> = tree
        .par_iter()
        .map(|&id| {
            let c = lat.cell(id).expect("tree id is valid");
            let l = lat.side_length(c.level);
            let big = Ball {
                center: c.z.clone(),
                radius: 28.0 * c.r / p.delta,
            };
            let parts: Vec<f64> = m
                .atoms_in_ball(&big)
                .into_iter()
                .filter(|&i| ctx.atom_in_f(i))
                .map(|i| m.weight(i) * ctx.sq_window(i, p.delta * l, l / p.delta))
                .collect();
            pairwise_sum(&parts)
        })
        .collect();
    let packing = TreePacking {
        root_density,
        stop_density_sum: pairwise_sum(&stop_terms),
        tree_sqfn_sum: pairwise_sum(&tree_terms),
    };

    let mut labels: Vec<CellLabel> = dr
        .iter()
        .enumerate()
        .map(|(i, &id)| CellLabel {
            cell: id,
            label: labels_by_idx[i],
        })
        .collect();
    labels.sort_unstable_by_key(|cl| cl.cell);

    Ok(CoronaTree {
        root: r_id,
        labels,
        term,
        good,
        reg,
        stop,
        tree,
        reg_diagnostics,
        packing,
        warnings,
    })
}

/// Evaluates both sides of the density-domination inequality at a cell:
/// when the mass of `δ⁻¹B_R ∩ F` failing the window test exceeds
/// `η·μ(R ∩ F)`, the density term `Θ(2B_R)²·μ(R ∩ F)` is at most the
/// square-function term `η⁻²·∫∫Δ²`. The hypothesis and both sides are
/// returned so callers can assert the implication.
pub fn sqfn_domination_check(
    m: &DiscreteMeasure,
    lat: &Lattice,
    r_id: usize,
    p: &CoronaParams,
) -> Result<SqfnDomination> {
    let ctx = Ctx::new(m, lat, p)?;
    let rc = lat.cell(r_id)?;
    let l = lat.side_length(rc.level);
    let (lo, hi) = (p.delta * l, l / p.delta);
    let theta2 = theta(m, &cell_ball(rc).scaled(2.0));
    let thr = p.eta * theta2.powi(2);
    let big = Ball {
        center: rc.z.clone(),
        radius: 28.0 * rc.r / p.delta,
    };
    let mut failing = Vec::new();
    let mut integrals = Vec::new();
    for i in m.atoms_in_ball(&big) {
        if !ctx.atom_in_f(i) {
            continue;
        }
        let w = m.weight(i);
        let integral = ctx.sq_window(i, lo, hi);
        integrals.push(w * integral);
        let in_g = if thr == 0.0 {
            integral == 0.0
        } else {
            integral <= thr
        };
        if !in_g {
            failing.push(w);
        }
    }
    let failing_mass = pairwise_sum(&failing);
    let cell_f_mass = ctx.cell_f_mass(rc);
    Ok(SqfnDomination {
        hypothesis: failing_mass > p.eta * cell_f_mass,
        density_term: theta2.powi(2) * cell_f_mass,
        sqfn_term: pairwise_sum(&integrals) / (p.eta * p.eta),
        failing_mass,
        cell_f_mass,
    })
}

/// Iterates the decomposition: generation 0 is the root alone, and each
/// stop cell of a generation's trees contributes its maximal doubling
/// cells to the next. Stops when a generation comes out empty or after
/// `max_rounds` additional generations. Cells whose tree cannot be built
/// are recorded and contribute nothing.
pub fn top_iteration(
    m: &DiscreteMeasure,
    lat: &Lattice,
    p: &CoronaParams,
    root: usize,
    max_rounds: usize,
) -> Result<TopIteration> {
    lat.cell(root)?;
    let mut generations = Vec::new();
    let mut current = vec![root];
    for _ in 0..=max_rounds {
        let density_terms: Vec<f64> = current
            .iter()
            .map(|&id| {
                let c = lat.cell(id).expect("generation id is valid");
                let ws: Vec<f64> = c.atom_ids.iter().map(|&i| m.weight(i)).collect();
                theta(m, &cell_ball(c).scaled(2.0)).powi(2) * pairwise_sum(&ws)
            })
            .collect();
        let mut skipped = Vec::new();
        let mut next = BTreeSet::new();
        for &id in &current {
            match build_tree(m, lat, id, p) {
                Ok(tree) => {
                    for &q in &tree.stop {
                        next.extend(lat.maximal_doubling(q)?);
                    }
                }
                Err(e) => skipped.push((id, e.to_string())),
            }
        }
        generations.push(TopGeneration {
            cells: current.clone(),
            density_sum: pairwise_sum(&density_terms),
            skipped,
        });
        current = next.into_iter().collect();
        if current.is_empty() || generations.len() > max_rounds {
            break;
        }
    }
    Ok(TopIteration { generations })
}

/// Packing comparison over the generations of [`top_iteration`]: the
/// density-weighted mass of every top cell against twice the root's plus
/// the square-function mass of the `F`-restricted measure over the scale
/// window the measure resolves (`δ ×` smallest nearest-neighbor distance
/// up to `δ⁻¹ ×` diameter).
pub fn packing_report(
    m: &DiscreteMeasure,
    lat: &Lattice,
    tops: &TopIteration,
    p: &CoronaParams,
) -> Result<PackingReport> {
    p.validate()?;
    let first = tops
        .generations
        .first()
        .ok_or_else(|| Error::Precondition("packing report needs at least one generation".into()))?;
    if first.cells.len() != 1 {
        return Err(Error::Precondition(format!(
            "generation 0 must be a single root cell, got {}",
            first.cells.len()
        )));
    }
    for g in &tops.generations {
        for &id in &g.cells {
            lat.cell(id)?;
        }
    }
    let sums: Vec<f64> = tops.generations.iter().map(|g| g.density_sum).collect();
    let lhs = pairwise_sum(&sums);
    let root_term = 2.0 * first.density_sum;

    let in_f: Option<Vec<bool>> = p.f_subset.as_ref().map(|ids| {
        let mut mask = vec![false; m.len()];
        for &i in ids {
            mask[i] = true;
        }
        mask
    });
    // Finest scale the measure itself resolves: the smallest positive
    // nearest-neighbor distance. Using a measure-intrinsic cap (rather than
    // the lattice floor) keeps reports comparable across lattice depths.
    let min_nn = (0..m.len())
        .filter_map(|i| m.nearest_atom(m.position(i), Some(i)))
        .map(|(_, d)| d)
        .filter(|d| *d > 0.0)
        .fold(f64::INFINITY, f64::min);
    let r_lo = p.delta * min_nn;
    let r_hi = m.diameter() / p.delta;
    let sqfn_term = if r_lo.is_finite() && r_hi > r_lo {
        let parts: Vec<f64> = (0..m.len())
            .into_par_iter()
            .map(|i| {
                if in_f.as_ref().map_or(true, |mask| mask[i]) {
                    m.weight(i)
                        * RadialProfile::new(m, m.position(i), None).square_integral(1, r_lo, r_hi)
                } else {
                    0.0
                }
            })
            .collect();
        pairwise_sum(&parts)
    } else {
        0.0
    };
    let rhs = root_term + sqfn_term;
    Ok(PackingReport {
        lhs,
        root_term,
        sqfn_term,
        rhs,
        ratio: lhs / rhs,
        r_lo,
        r_hi,
    })
}
