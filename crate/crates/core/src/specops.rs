//! Pseudo-differential operators as momentum-lattice multipliers.
//!
//! Everything here is a pure Fourier multiplier: omega(D), its gradient,
//! the two-particle sum omega~(D), free propagators e^{-it omega}, plus the
//! position-side scaled cutoffs h(x/t). Symbols are sampled directly on the
//! lattice; packet constructors keep Fourier support in the central 2/3 of
//! the lattice so no dealiasing is applied here.

use num_complex::Complex64;

use crate::detectors::Cutoff;
use crate::error::{Error, Result};
use crate::grid::{apply_momentum_table, unravel, Field, GridSpec, Space};

/// Which configuration space a multiplier acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arity {
    OneParticle,
    TwoParticle,
}

/// Sampled function of the momentum lattice defining a diagonal operator.
#[derive(Debug, Clone)]
pub struct Multiplier {
    pub grid: GridSpec,
    pub arity: Arity,
    pub samples: Vec<Complex64>,
}

impl Multiplier {
    fn expected_len(grid: &GridSpec, arity: Arity) -> usize {
        match arity {
            Arity::OneParticle => grid.len1(),
            Arity::TwoParticle => grid.len2(),
        }
    }

    fn axes(&self) -> usize {
        match self.arity {
            Arity::OneParticle => self.grid.d,
            Arity::TwoParticle => 2 * self.grid.d,
        }
    }

    /// Sample a real symbol over the momentum lattice of the given arity.
    pub fn from_real_symbol(
        grid: &GridSpec,
        arity: Arity,
        symbol: impl Fn(&[f64]) -> f64,
    ) -> Self {
        let axes = match arity {
            Arity::OneParticle => grid.d,
            Arity::TwoParticle => 2 * grid.d,
        };
        let len = Self::expected_len(grid, arity);
        let mut samples = vec![Complex64::new(0.0, 0.0); len];
        let mut idx = vec![0usize; axes];
        let mut p = vec![0.0; axes];
        for (flat, s) in samples.iter_mut().enumerate() {
            unravel(flat, grid.n, &mut idx);
            for a in 0..axes {
                p[a] = grid.p_at(idx[a]);
            }
            *s = Complex64::new(symbol(&p), 0.0);
        }
        Multiplier {
            grid: grid.clone(),
            arity,
            samples,
        }
    }

    pub fn is_real(&self, tol: f64) -> bool {
        self.samples.iter().all(|s| s.im.abs() <= tol)
    }

    pub fn sup_norm(&self) -> f64 {
        self.samples.iter().map(|s| s.norm()).fold(0.0, f64::max)
    }
}

/// omega(p) = sqrt(p^2 + m^2) on the one-particle lattice.
pub fn omega_multiplier(grid: &GridSpec, m: f64) -> Result<Multiplier> {
    check_mass(m)?;
    Ok(Multiplier::from_real_symbol(
        grid,
        Arity::OneParticle,
        |p| omega(p, m),
    ))
}

/// Group-velocity components p_j / omega(p); one multiplier per axis.
pub fn grad_omega_multiplier(grid: &GridSpec, m: f64) -> Result<Vec<Multiplier>> {
    check_mass(m)?;
    Ok((0..grid.d)
        .map(|j| {
            Multiplier::from_real_symbol(grid, Arity::OneParticle, |p| p[j] / omega(p, m))
        })
        .collect())
}

/// Two-particle dispersion omega~(p1, p2) = omega(p1) + omega(p2).
pub fn omega_tilde_multiplier(grid: &GridSpec, m: f64) -> Result<Multiplier> {
    check_mass(m)?;
    let d = grid.d;
    Ok(Multiplier::from_real_symbol(
        grid,
        Arity::TwoParticle,
        |p| omega(&p[..d], m) + omega(&p[d..], m),
    ))
}

/// Group-velocity components of omega~: d/dp_j omega~ for each of the 2d axes.
pub fn grad_omega_tilde_multiplier(grid: &GridSpec, m: f64) -> Result<Vec<Multiplier>> {
    check_mass(m)?;
    let d = grid.d;
    Ok((0..2 * d)
        .map(|j| {
            Multiplier::from_real_symbol(grid, Arity::TwoParticle, |p| {
                if j < d {
                    p[j] / omega(&p[..d], m)
                } else {
                    p[j] / omega(&p[d..], m)
                }
            })
        })
        .collect())
}

pub fn omega(p: &[f64], m: f64) -> f64 {
    let p2: f64 = p.iter().map(|c| c * c).sum();
    (p2 + m * m).sqrt()
}

fn check_mass(m: f64) -> Result<()> {
    if m > 0.0 && m.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(format!("mass must be positive, got {m}")))
    }
}

fn check_arity<const P: usize>(mult: &Multiplier) -> Result<()> {
    let ok = match mult.arity {
        Arity::OneParticle => P == 1,
        Arity::TwoParticle => P == 2,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::validation("multiplier arity does not match field"))
    }
}

/// f(D) applied by Fourier conjugation; accepts a field in either
/// representation and returns it in the same one.
pub fn apply_multiplier<const P: usize>(mult: &Multiplier, field: &Field<P>) -> Result<Field<P>> {
    check_arity::<P>(mult)?;
    if mult.grid != field.grid {
        return Err(Error::validation("multiplier grid does not match field"));
    }
    match field.space {
        Space::Momentum => {
            let mut out = field.clone();
            for (v, s) in out.values.iter_mut().zip(&mult.samples) {
                *v *= s;
            }
            Ok(out)
        }
        Space::Position => {
            let mut out = field.clone();
            apply_momentum_table(&mut out, &mult.samples);
            Ok(out)
        }
    }
}

/// Unitary map e^{-i t f(D)} for a real multiplier f.
pub struct FreePropagator {
    phases: Vec<Complex64>,
    grid: GridSpec,
    arity: Arity,
}

impl FreePropagator {
    /// Build e^{-i t mult}; rejects complex-valued multipliers.
    pub fn new(mult: &Multiplier, t: f64) -> Result<Self> {
        if !mult.is_real(1e-14 * mult.sup_norm().max(1.0)) {
            return Err(Error::validation(
                "free propagator requires a real multiplier",
            ));
        }
        let phases = mult
            .samples
            .iter()
            .map(|s| Complex64::from_polar(1.0, -t * s.re))
            .collect();
        Ok(FreePropagator {
            phases,
            grid: mult.grid.clone(),
            arity: mult.arity,
        })
    }

    pub fn apply<const P: usize>(&self, field: &Field<P>) -> Result<Field<P>> {
        let mult = Multiplier {
            grid: self.grid.clone(),
            arity: self.arity,
            samples: self.phases.clone(),
        };
        apply_multiplier(&mult, field)
    }

    /// In-place fast path for position-space fields.
    pub fn apply_in_place<const P: usize>(&self, field: &mut Field<P>) -> Result<()> {
        check_arity::<P>(&Multiplier {
            grid: self.grid.clone(),
            arity: self.arity,
            samples: Vec::new(),
        })?;
        match field.space {
            Space::Momentum => {
                for (v, s) in field.values.iter_mut().zip(&self.phases) {
                    *v *= s;
                }
            }
            Space::Position => apply_momentum_table(field, &self.phases),
        }
        Ok(())
    }
}

/// Convenience: e^{-i t omega-type} applied to a field.
pub fn free_propagate<const P: usize>(
    mult: &Multiplier,
    t: f64,
    field: &Field<P>,
) -> Result<Field<P>> {
    FreePropagator::new(mult, t)?.apply(field)
}

/// Sample h(x/t) over the position lattice of a P-particle field.
///
/// For `P = 1` the cutoff is evaluated at x/t in R^d. For `P = 2` see
/// [`crate::detectors`] for the product forms; this helper applies a single
/// one-particle cutoff h to the chosen particle slot.
pub fn position_cutoff_samples<const P: usize>(
    grid: &GridSpec,
    h: &Cutoff,
    t: f64,
    slot: usize,
) -> Result<Vec<f64>> {
    if t <= 0.0 {
        return Err(Error::validation(format!("scaled cutoff needs t > 0, got {t}")));
    }
    let axes = P * grid.d;
    let d = grid.d;
    if (slot + 1) * d > axes {
        return Err(Error::validation("cutoff slot out of range"));
    }
    let len = grid.n.pow(axes as u32);
    let mut out = vec![0.0; len];
    let mut idx = vec![0usize; axes];
    let mut y = vec![0.0; d];
    for (flat, o) in out.iter_mut().enumerate() {
        unravel(flat, grid.n, &mut idx);
        for a in 0..d {
            y[a] = grid.x_at(idx[slot * d + a]) / t;
        }
        *o = h.eval(&y);
    }
    Ok(out)
}

/// Multiplication by h(x/t) on a one-particle field.
pub fn position_cutoff_scaled(h: &Cutoff, t: f64, field: &Field<1>) -> Result<Field<1>> {
    let samples = position_cutoff_samples::<1>(&field.grid, h, t, 0)?;
    let mut out = crate::grid::to_space(field, Space::Position);
    out.multiply_real_samples(&samples);
    Ok(out)
}

/// Velocity cutoff h(grad omega(D)) as a one-particle multiplier.
pub fn velocity_cutoff(grid: &GridSpec, h: &Cutoff, m: f64) -> Result<Multiplier> {
    check_mass(m)?;
    let d = grid.d;
    Ok(Multiplier::from_real_symbol(
        grid,
        Arity::OneParticle,
        |p| {
            let om = omega(p, m);
            let v: Vec<f64> = p.iter().map(|c| c / om).collect();
            h.eval(&v[..d])
        },
    ))
}

/// Product velocity cutoff h1(grad omega(D_1)) h2(grad omega(D_2)) on the
/// two-particle lattice.
pub fn velocity_cutoff_product(
    grid: &GridSpec,
    h1: &Cutoff,
    h2: &Cutoff,
    m: f64,
) -> Result<Multiplier> {
    check_mass(m)?;
    let d = grid.d;
    let h1 = h1.clone();
    let h2 = h2.clone();
    Ok(Multiplier::from_real_symbol(
        grid,
        Arity::TwoParticle,
        move |p| {
            let om1 = omega(&p[..d], m);
            let om2 = omega(&p[d..], m);
            let v1: Vec<f64> = p[..d].iter().map(|c| c / om1).collect();
            let v2: Vec<f64> = p[d..].iter().map(|c| c / om2).collect();
            h1.eval(&v1) * h2.eval(&v2)
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{inner_product, l2_distance, make_grid};
    use num_complex::Complex64 as C;

    #[test]
    fn omega_values() {
        let g = make_grid(1, 16, std::f64::consts::PI).unwrap(); // integer lattice
        let om = omega_multiplier(&g, 1.0).unwrap();
        assert!((om.samples[0].re - 1.0).abs() < 1e-15); // p=0 -> m
        let om45 = omega_multiplier(&g, 4.0).unwrap();
        assert!((om45.samples[3].re - 5.0).abs() < 1e-12); // p=3, m=4 -> 5
        assert!(om45.samples.iter().all(|s| s.re >= 4.0));
    }

    #[test]
    fn grad_omega_values_and_subluminal() {
        let g = make_grid(1, 16, std::f64::consts::PI).unwrap();
        let gv = grad_omega_multiplier(&g, 4.0).unwrap();
        assert_eq!(gv.len(), 1);
        assert!((gv[0].samples[0].re).abs() < 1e-15);
        assert!((gv[0].samples[3].re - 0.6).abs() < 1e-12); // 3/5
        for s in &gv[0].samples {
            assert!(s.re.abs() < 1.0);
        }
        assert!(grad_omega_multiplier(&g, 0.0).is_err());
    }

    #[test]
    fn omega_tilde_values_and_symmetry() {
        let g = make_grid(1, 16, std::f64::consts::PI).unwrap();
        let ot = omega_tilde_multiplier(&g, 1.0).unwrap();
        assert!((ot.samples[0].re - 2.0).abs() < 1e-15);
        let ot4 = omega_tilde_multiplier(&g, 4.0).unwrap();
        // (p1,p2) = (3,0): flat index 3*16 + 0
        assert!((ot4.samples[3 * 16].re - 9.0).abs() < 1e-12);
        // symmetric under swap of p1 and p2
        for k1 in 0..16 {
            for k2 in 0..16 {
                let a = ot4.samples[k1 * 16 + k2].re;
                let b = ot4.samples[k2 * 16 + k1].re;
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_multiplier_and_eigenfunction() {
        let g = make_grid(1, 32, 8.0).unwrap();
        let id = Multiplier::from_real_symbol(&g, Arity::OneParticle, |_| 1.0);
        let f = Field::<1>::from_fn(&g, Space::Position, |x| C::new((-x[0] * x[0] / 4.0).exp(), 0.1));
        let out = apply_multiplier(&id, &f).unwrap();
        assert!(l2_distance(&f, &out).unwrap() < 1e-12 * f.l2_norm());

        // omega applied to a plane wave multiplies by omega(p_k)
        let pk = g.p_at(5);
        let pw = Field::<1>::from_fn(&g, Space::Position, |x| C::from_polar(1.0, pk * x[0]));
        let om = omega_multiplier(&g, 1.0).unwrap();
        let out = apply_multiplier(&om, &pw).unwrap();
        let expect = omega(&[pk], 1.0);
        let mut scaled = pw.clone();
        scaled.scale(expect);
        assert!(l2_distance(&out, &scaled).unwrap() < 1e-11 * scaled.l2_norm());
    }

    #[test]
    fn multipliers_commute() {
        let g = make_grid(1, 32, 8.0).unwrap();
        let a = omega_multiplier(&g, 1.0).unwrap();
        let b = Multiplier::from_real_symbol(&g, Arity::OneParticle, |p| (p[0] * 0.3).cos());
        let f = Field::<1>::from_fn(&g, Space::Position, |x| {
            C::new((-x[0] * x[0] / 3.0).exp(), (x[0] * 0.5).sin())
        });
        let ab = apply_multiplier(&a, &apply_multiplier(&b, &f).unwrap()).unwrap();
        let ba = apply_multiplier(&b, &apply_multiplier(&a, &f).unwrap()).unwrap();
        assert!(l2_distance(&ab, &ba).unwrap() < 1e-12 * ab.l2_norm());
    }

    #[test]
    fn multiplier_application_linear() {
        let g = make_grid(1, 32, 8.0).unwrap();
        let m = omega_multiplier(&g, 1.5).unwrap();
        let f1 = Field::<1>::from_fn(&g, Space::Position, |x| C::new((-x[0] * x[0] / 2.0).exp(), 0.0));
        let f2 = Field::<1>::from_fn(&g, Space::Position, |x| C::new(0.0, (-(x[0] - 1.0).powi(2)).exp()));
        let mut sum = f1.clone();
        sum.axpy(C::new(0.7, -0.2), &f2).unwrap();
        let lhs = apply_multiplier(&m, &sum).unwrap();
        let mut rhs = apply_multiplier(&m, &f1).unwrap();
        rhs.axpy(C::new(0.7, -0.2), &apply_multiplier(&m, &f2).unwrap())
            .unwrap();
        assert!(l2_distance(&lhs, &rhs).unwrap() < 1e-12 * lhs.l2_norm());
    }

    #[test]
    fn propagator_unitary_group_law() {
        let g = make_grid(1, 64, 12.0).unwrap();
        let om = omega_multiplier(&g, 1.0).unwrap();
        let f = Field::<1>::from_fn(&g, Space::Position, |x| {
            C::new((-x[0] * x[0] / 2.0).exp() * (1.1 * x[0]).cos(), 0.3)
        });
        let u0 = free_propagate(&om, 0.0, &f).unwrap();
        assert!(l2_distance(&u0, &f).unwrap() < 1e-13 * f.l2_norm());

        let u100 = free_propagate(&om, 100.0, &f).unwrap();
        assert!((u100.l2_norm() - f.l2_norm()).abs() < 1e-12 * f.l2_norm());

        let a = free_propagate(&om, 2.5, &free_propagate(&om, 1.5, &f).unwrap()).unwrap();
        let b = free_propagate(&om, 4.0, &f).unwrap();
        assert!(l2_distance(&a, &b).unwrap() < 1e-12 * b.l2_norm());

        // inverse
        let back = free_propagate(&om, -100.0, &u100).unwrap();
        assert!(l2_distance(&back, &f).unwrap() < 1e-12 * f.l2_norm());
    }

    #[test]
    fn propagator_rejects_complex_multiplier() {
        let g = make_grid(1, 16, 8.0).unwrap();
        let mut m = omega_multiplier(&g, 1.0).unwrap();
        m.samples[2] = C::new(1.0, 0.5);
        assert!(FreePropagator::new(&m, 1.0).is_err());
    }

    #[test]
    fn position_cutoff_identity_annihilation_selfadjoint() {
        let g = make_grid(1, 32, 8.0).unwrap();
        let f = Field::<1>::from_fn(&g, Space::Position, |x| {
            C::new((-x[0] * x[0] / 2.0).exp(), 0.2 * x[0])
        });
        // h == 1 over the whole box image: huge plateau
        let h1 = Cutoff::new(vec![0.0], 100.0, 101.0).unwrap();
        let out = position_cutoff_scaled(&h1, 2.0, &f).unwrap();
        assert!(l2_distance(&out, &f).unwrap() < 1e-13 * f.l2_norm());

        // h supported outside box/t image at large t annihilates
        let hfar = Cutoff::new(vec![50.0], 1.0, 2.0).unwrap();
        let out = position_cutoff_scaled(&hfar, 1.0, &f).unwrap();
        assert!(out.l2_norm() < 1e-14);

        // self-adjointness of real multiplication
        let g2 = Field::<1>::from_fn(&g, Space::Position, |x| C::new((0.4 * x[0]).sin(), -0.1));
        let h = Cutoff::new(vec![0.2], 0.5, 1.0).unwrap();
        let hf = position_cutoff_scaled(&h, 3.0, &f).unwrap();
        let hg = position_cutoff_scaled(&h, 3.0, &g2).unwrap();
        let a = inner_product(&f, &hg).unwrap();
        let b = inner_product(&hf, &g2).unwrap();
        assert!((a - b).norm() < 1e-12 * a.norm().max(1.0));

        assert!(position_cutoff_scaled(&h, 0.0, &f).is_err());
    }

    #[test]
    fn velocity_cutoff_cases() {
        let g = make_grid(1, 64, 8.0).unwrap();
        let f = Field::<1>::from_fn(&g, Space::Position, |x| {
            C::new((-x[0] * x[0] / 2.0).exp(), 0.0)
        });
        // h == 1 on (-1,1) covers all group velocities -> identity
        let hall = Cutoff::new(vec![0.0], 1.0, 1.05).unwrap();
        let m = velocity_cutoff(&g, &hall, 1.0).unwrap();
        let out = apply_multiplier(&m, &f).unwrap();
        assert!(l2_distance(&out, &f).unwrap() < 1e-12 * f.l2_norm());

        // h supported at |v| > 1 -> zero map
        let hfar = Cutoff::new(vec![3.0], 0.5, 1.0).unwrap();
        let m = velocity_cutoff(&g, &hfar, 1.0).unwrap();
        assert!(m.sup_norm() < 1e-15);

        // composition value: h(v) = v realized through a plateau... use exact composition instead
        let g2 = make_grid(1, 16, std::f64::consts::PI).unwrap();
        let m = Multiplier::from_real_symbol(&g2, Arity::OneParticle, |p| p[0] / omega(p, 4.0));
        assert!((m.samples[3].re - 0.6).abs() < 1e-12);
    }
}
