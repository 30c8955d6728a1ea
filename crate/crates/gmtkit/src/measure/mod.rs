//! Measure representations and exact ball-mass queries.
//!
//! Everything downstream is built on two immutable carriers: a weighted atom
//! cloud ([`DiscreteMeasure`]) and a piecewise-constant-density polygonal
//! chain ([`PolylineMeasure`]). Ball masses use the closed-ball convention,
//! so `r -> mass(B(x, r))` is a right-continuous step function; the exact
//! square-function integrator depends on that.

mod discrete;
mod polyline;

pub use discrete::DiscreteMeasure;
pub use polyline::{Chain, PolylineMeasure};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point of R^d.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Point {
    pub coords: Vec<f64>,
}

impl Point {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() || coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidMeasure(format!(
                "point coordinates must be finite and nonempty, got {coords:?}"
            )));
        }
        Ok(Point { coords })
    }

    /// Planar shorthand.
    pub fn xy(x: f64, y: f64) -> Self {
        Point { coords: vec![x, y] }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn dist_sq(&self, other: &Point) -> f64 {
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn dist(&self, other: &Point) -> f64 {
        self.dist_sq(other).sqrt()
    }

    pub fn sub(&self, other: &Point) -> Vec<f64> {
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| a - b)
            .collect()
    }

    /// self + t * (other - self).
    pub fn lerp(&self, other: &Point, t: f64) -> Point {
        Point {
            coords: self
                .coords
                .iter()
                .zip(&other.coords)
                .map(|(a, b)| a + t * (b - a))
                .collect(),
        }
    }
}

/// Closed ball B(center, radius).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Point,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Point, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidBall(radius));
        }
        Ok(Ball { center, radius })
    }

    /// The dilation aB: same center, radius scaled by `a`.
    pub fn scaled(&self, a: f64) -> Ball {
        Ball {
            center: self.center.clone(),
            radius: self.radius * a,
        }
    }

    pub fn contains(&self, p: &Point) -> bool {
        self.center.dist(p) <= self.radius
    }
}

/// Fixed-order pairwise-tree summation: bit-reproducible for a given slice.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        let mut acc = 0.0;
        for x in xs {
            acc += x;
        }
        acc
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

/// Measures that answer exact closed-ball mass queries.
pub trait BallMass {
    fn ball_mass(&self, b: &Ball) -> f64;
    fn total_mass(&self) -> f64;
    fn dim(&self) -> usize;
}

/// Density Theta(B) = mass(B) / r(B).
pub fn theta<M: BallMass>(m: &M, b: &Ball) -> f64 {
    m.ball_mass(b) / b.radius
}

/// n-dimensional density Theta^n(B) = mass(B) / r(B)^n.
pub fn theta_n<M: BallMass>(m: &M, b: &Ball, n: u32) -> f64 {
    m.ball_mass(b) / b.radius.powi(n as i32)
}
