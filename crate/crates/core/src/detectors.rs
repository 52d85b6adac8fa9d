//! Scaled cutoff functions and detector expectation values.
//!
//! A `Cutoff` is a smooth [0,1]-valued function of a velocity-type variable:
//! 1 inside an inner ball, 0 outside an outer ball, with the fixed bump-step
//! transition between. Products h1(x1/t) h2(x2/t) with disjoint supports are
//! the amplitude-level detectors; `Cutoff2P` also covers smooth two-particle
//! regions with declared diagonal clearance.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::bump::transition_down;
use crate::error::{Error, Result};
use crate::grid::{inner_product, unravel, Field, GridSpec, Space};
use crate::series::DiagnosticSeries;

/// Smooth radial cutoff in velocity space: 1 on |v - center| <= a,
/// 0 on |v - center| >= b.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cutoff {
    pub center: Vec<f64>,
    pub inner_radius: f64,
    pub outer_radius: f64,
}

impl Cutoff {
    pub fn new(center: Vec<f64>, inner_radius: f64, outer_radius: f64) -> Result<Self> {
        if !(inner_radius >= 0.0 && outer_radius > inner_radius) {
            return Err(Error::validation(format!(
                "cutoff radii must satisfy 0 <= a < b, got a={inner_radius}, b={outer_radius}"
            )));
        }
        Ok(Cutoff {
            center,
            inner_radius,
            outer_radius,
        })
    }

    /// Interval plateau in one dimension: 1 on [lo, hi], 0 outside
    /// [lo - delta, hi + delta].
    pub fn interval(lo: f64, hi: f64, delta: f64) -> Result<Self> {
        if !(hi > lo && delta > 0.0) {
            return Err(Error::validation("interval cutoff needs hi > lo, delta > 0"));
        }
        Cutoff::new(
            vec![0.5 * (lo + hi)],
            0.5 * (hi - lo),
            0.5 * (hi - lo) + delta,
        )
    }

    pub fn eval(&self, v: &[f64]) -> f64 {
        debug_assert_eq!(v.len(), self.center.len());
        let r2: f64 = v
            .iter()
            .zip(&self.center)
            .map(|(x, c)| (x - c) * (x - c))
            .sum();
        transition_down(r2.sqrt(), self.inner_radius, self.outer_radius)
    }

    /// Distance between the supports of two cutoffs (0 if they overlap).
    pub fn support_distance(&self, other: &Cutoff) -> f64 {
        let dc: f64 = self
            .center
            .iter()
            .zip(&other.center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        (dc - self.outer_radius - other.outer_radius).max(0.0)
    }
}

/// Two-particle cutoff: either a product of two disjoint one-particle
/// cutoffs (the detector form H_t) or a smooth region with declared
/// diagonal clearance (the H~ form used off the diagonal).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Cutoff2P {
    Product { h1: Cutoff, h2: Cutoff },
    /// shell(|x~|) * (1 - transition(|x1 - x2|)): vanishes for
    /// |x1 - x2| <= diag_clearance, supported in |x~| <= outer_radius.
    DiagonalClearing {
        inner_radius: f64,
        outer_radius: f64,
        diag_clearance: f64,
        diag_transition: f64,
        radial_transition: f64,
    },
}

impl Cutoff2P {
    pub fn product(h1: Cutoff, h2: Cutoff) -> Result<Self> {
        if h1.support_distance(&h2) <= 0.0 {
            return Err(Error::validation(format!(
                "product cutoff requires disjoint supports (margin {} <= 0)",
                h1.support_distance(&h2)
            )));
        }
        Ok(Cutoff2P::Product { h1, h2 })
    }

    pub fn diagonal_clearing(
        inner_radius: f64,
        outer_radius: f64,
        diag_clearance: f64,
        diag_transition: f64,
        radial_transition: f64,
    ) -> Result<Self> {
        if diag_clearance <= 0.0 {
            return Err(Error::validation(
                "diagonal clearance must be strictly positive",
            ));
        }
        if !(outer_radius > inner_radius && inner_radius >= 0.0) {
            return Err(Error::validation("bad radial shell for two-particle cutoff"));
        }
        Ok(Cutoff2P::DiagonalClearing {
            inner_radius,
            outer_radius,
            diag_clearance,
            diag_transition,
            radial_transition,
        })
    }

    /// Declared clearance from the diagonal {x1 = x2}, in the scaled variable.
    pub fn diagonal_clearance(&self) -> f64 {
        match self {
            // |x1 - x2| >= |c1 - c2| - b1 - b2 on the support
            Cutoff2P::Product { h1, h2 } => h1.support_distance(h2),
            Cutoff2P::DiagonalClearing { diag_clearance, .. } => *diag_clearance,
        }
    }

    /// Evaluate at the scaled two-particle point (y1, y2), each in R^d.
    pub fn eval(&self, y: &[f64], d: usize) -> f64 {
        match self {
            Cutoff2P::Product { h1, h2 } => h1.eval(&y[..d]) * h2.eval(&y[d..]),
            Cutoff2P::DiagonalClearing {
                inner_radius,
                outer_radius,
                diag_clearance,
                diag_transition,
                radial_transition,
            } => {
                let r: f64 = y.iter().map(|c| c * c).sum::<f64>().sqrt();
                let rel: f64 = (0..d)
                    .map(|a| (y[a] - y[d + a]) * (y[a] - y[d + a]))
                    .sum::<f64>()
                    .sqrt();
                let shell = if *inner_radius > 0.0 {
                    crate::bump::plateau(
                        r,
                        *inner_radius,
                        *outer_radius,
                        *radial_transition,
                    )
                } else {
                    transition_down(r, *outer_radius, *outer_radius + *radial_transition)
                };
                shell
                    * crate::bump::transition_up(
                        rel,
                        *diag_clearance,
                        *diag_clearance + *diag_transition,
                    )
            }
        }
    }

    /// Sample H(x~/t) over the two-particle position lattice.
    pub fn samples(&self, grid: &GridSpec, t: f64) -> Result<Vec<f64>> {
        if t <= 0.0 {
            return Err(Error::validation(format!("need t > 0, got {t}")));
        }
        let d = grid.d;
        let axes = 2 * d;
        let len = grid.len2();
        let mut out = vec![0.0; len];
        let mut idx = vec![0usize; axes];
        let mut y = vec![0.0; axes];
        for (flat, o) in out.iter_mut().enumerate() {
            unravel(flat, grid.n, &mut idx);
            for a in 0..axes {
                y[a] = grid.x_at(idx[a]) / t;
            }
            *o = self.eval(&y, d);
        }
        Ok(out)
    }
}

/// Multiply a two-particle field by H(x~/t).
pub fn apply_ht(cut: &Cutoff2P, t: f64, field: &Field<2>) -> Result<Field<2>> {
    let samples = cut.samples(&field.grid, t)?;
    let mut out = crate::grid::to_space(field, Space::Position);
    out.multiply_real_samples(&samples);
    Ok(out)
}

/// Detector quadratic form <F, H(x~/t) F>; real and within [0, ||F||^2].
pub fn detector_expectation(cut: &Cutoff2P, t: f64, field: &Field<2>) -> Result<f64> {
    let samples = cut.samples(&field.grid, t)?;
    if samples.iter().any(|&s| !(0.0..=1.0 + 1e-12).contains(&s)) {
        return Err(Error::validation("cutoff values must lie in [0, 1]"));
    }
    let pos = crate::grid::to_space(field, Space::Position);
    let w = pos.weight();
    let acc: f64 = pos
        .values
        .iter()
        .zip(&samples)
        .map(|(v, s)| v.norm_sqr() * s)
        .sum();
    Ok(acc * w)
}

/// Coincidence expectation <F_t, h1(x1/t) h2(x2/t) F_t> along a trajectory.
pub fn two_detector_sweep(
    h1: &Cutoff,
    h2: &Cutoff,
    snapshots: &[(f64, Field<2>)],
) -> Result<DiagnosticSeries> {
    let cut = Cutoff2P::product(h1.clone(), h2.clone())?;
    let mut times = Vec::with_capacity(snapshots.len());
    let mut vals = Vec::with_capacity(snapshots.len());
    for (t, field) in snapshots {
        times.push(*t);
        vals.push(detector_expectation(&cut, *t, field)?);
    }
    Ok(DiagnosticSeries::from_samples(times, vals))
}

/// Inner product wrapper kept here so detector-style code reads naturally.
pub fn quadratic_form<const P: usize>(
    field: &Field<P>,
    other: &Field<P>,
) -> Result<Complex64> {
    inner_product(field, other)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use num_complex::Complex64 as C;

    #[test]
    fn cutoff_shape() {
        let h = Cutoff::new(vec![0.5], 0.1, 0.2).unwrap();
        assert_eq!(h.eval(&[0.5]), 1.0);
        assert_eq!(h.eval(&[0.55]), 1.0);
        assert_eq!(h.eval(&[0.75]), 0.0);
        let mid = h.eval(&[0.65]);
        assert!(mid > 0.0 && mid < 1.0);
    }

    #[test]
    fn product_requires_disjoint() {
        let h1 = Cutoff::new(vec![0.5], 0.1, 0.2).unwrap();
        let h2 = Cutoff::new(vec![-0.5], 0.1, 0.2).unwrap();
        assert!(Cutoff2P::product(h1.clone(), h2).is_ok());
        let h3 = Cutoff::new(vec![0.6], 0.1, 0.2).unwrap();
        assert!(Cutoff2P::product(h1, h3).is_err());
    }

    #[test]
    fn expectation_bounds_and_extremes() {
        let g = make_grid(1, 32, 8.0).unwrap();
        // field concentrated near (x1, x2) = (4, -4) at t=1
        let f = Field::<2>::from_fn(&g, Space::Position, |x| {
            C::new(
                (-(x[0] - 4.0).powi(2) - (x[1] + 4.0).powi(2)).exp(),
                0.0,
            )
        });
        let h1 = Cutoff::new(vec![4.0], 3.0, 3.5).unwrap();
        let h2 = Cutoff::new(vec![-4.0], 3.0, 3.5).unwrap();
        let cut = Cutoff2P::product(h1, h2).unwrap();
        let e = detector_expectation(&cut, 1.0, &f).unwrap();
        let n2 = f.norm_sqr();
        assert!(e > 0.0 && e <= n2 * (1.0 + 1e-12));
        assert!((e - n2).abs() < 1e-6 * n2, "support inside plateau: e={e} vs {n2}");

        // disjoint-from-support cutoff gives ~0 and annihilates
        let hfar1 = Cutoff::new(vec![-6.0], 0.5, 1.0).unwrap();
        let hfar2 = Cutoff::new(vec![6.0], 0.5, 1.0).unwrap();
        let far = Cutoff2P::product(hfar1, hfar2).unwrap();
        assert!(detector_expectation(&far, 1.0, &f).unwrap() < 1e-12 * n2);
        let killed = apply_ht(&far, 1.0, &f).unwrap();
        assert!(killed.l2_norm() < 1e-9 * f.l2_norm());
    }

    #[test]
    fn idempotent_on_plateau() {
        let g = make_grid(1, 32, 8.0).unwrap();
        let f = Field::<2>::from_fn(&g, Space::Position, |x| {
            C::new((-(x[0] - 4.0).powi(2) - (x[1] + 4.0).powi(2)).exp(), 0.0)
        });
        let h1 = Cutoff::new(vec![4.0], 3.0, 3.5).unwrap();
        let h2 = Cutoff::new(vec![-4.0], 3.0, 3.5).unwrap();
        let cut = Cutoff2P::product(h1, h2).unwrap();
        let once = apply_ht(&cut, 1.0, &f).unwrap();
        let twice = apply_ht(&cut, 1.0, &once).unwrap();
        // mass in the transition regions bounds the idempotence defect:
        // h - h^2 <= 1/4 there and vanishes elsewhere
        let samples = cut.samples(&g, 1.0).unwrap();
        let w = once.weight();
        let trans_mass: f64 = f
            .values
            .iter()
            .zip(&samples)
            .filter(|(_, s)| **s > 0.0 && **s < 1.0)
            .map(|(v, _)| v.norm_sqr() * w)
            .sum();
        let d = crate::grid::l2_distance(&once, &twice).unwrap();
        assert!(
            d <= 0.25 * trans_mass.sqrt() + 1e-12,
            "defect {d} vs transition mass {trans_mass}"
        );
    }

    #[test]
    fn monotone_in_cutoff() {
        let g = make_grid(1, 16, 6.0).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut f = Field::<2>::zeros(&g, Space::Position);
        for v in &mut f.values {
            *v = C::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        // H <= H' pointwise: same centers, larger plateau
        let small = Cutoff2P::product(
            Cutoff::new(vec![2.0], 0.5, 1.0).unwrap(),
            Cutoff::new(vec![-2.0], 0.5, 1.0).unwrap(),
        )
        .unwrap();
        let big = Cutoff2P::product(
            Cutoff::new(vec![2.0], 1.0, 1.5).unwrap(),
            Cutoff::new(vec![-2.0], 1.0, 1.5).unwrap(),
        )
        .unwrap();
        let es = detector_expectation(&small, 1.0, &f).unwrap();
        let eb = detector_expectation(&big, 1.0, &f).unwrap();
        assert!(es <= eb + 1e-12);
    }

    #[test]
    fn diagonal_clearing_vanishes_on_tube() {
        let cut = Cutoff2P::diagonal_clearing(0.0, 3.0, 0.4, 0.1, 0.2).unwrap();
        assert_eq!(cut.eval(&[1.0, 1.1], 1), 0.0); // |x1-x2| = 0.1 < 0.4
        assert!(cut.eval(&[1.0, 0.2], 1) > 0.0); // |x1-x2| = 0.8, |y| < 3
        assert_eq!(cut.eval(&[4.0, -4.0], 1), 0.0); // outside shell
        assert!(Cutoff2P::diagonal_clearing(0.0, 3.0, 0.0, 0.1, 0.2).is_err());
    }
}
