//! Propagation-estimate diagnostics: the large-velocity and phase-space
//! integrands with their running dt/t integrals, the free phase-space bound,
//! and the bookkeeping monitors for the inhomogeneous evolution equation.

use num_complex::Complex64;
use serde::Serialize;

use crate::detectors::Cutoff2P;
use crate::dynamics::{advance, source_at, Propagator2P, Trajectory};
use crate::error::{Error, Result};
use crate::graf::{GrafFunction, RegionSpec};
use crate::grid::{inner_product, l2_distance, Field, GridSpec, Space};
use crate::series::{fit_slope, DiagnosticSeries};
use crate::specops::{grad_omega_tilde_multiplier, Multiplier};

/// Smoothing width for sharp indicator functions, in scaled (x~/t) units.
pub const INDICATOR_TRANSITION: f64 = 0.05;

/// A primitive factor of a propagation observable.
pub enum Factor {
    /// Multiplication by a sampled profile of x~/t (bounded; the profile
    /// carries its own sup bound and diagonal clearance declaration).
    PositionProfile(ScaledProfile),
    /// A momentum multiplier g(p~) (bounded by its sup norm).
    MomentumMultiplier(Multiplier),
    /// The transport component x~_j / t - (grad omega~)_j(D). Unbounded by
    /// itself; every occurrence must be adjacent to a compactly supported
    /// position profile.
    Transport { axis: usize },
}

/// Profile of the scaled variable y = x~/t with metadata.
pub struct ScaledProfile {
    pub eval: Box<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub sup: f64,
    /// Declared clearance of the support from the diagonal {x1 = x2}
    /// (0 when the profile does not vanish near it).
    pub diag_clearance: f64,
}

impl ScaledProfile {
    pub fn from_cutoff2p(cut: &Cutoff2P, d: usize) -> Self {
        let clearance = cut.diagonal_clearance();
        let c = cut.clone();
        ScaledProfile {
            eval: Box::new(move |y| c.eval(y, d)),
            sup: 1.0,
            diag_clearance: clearance,
        }
    }

    /// Smoothed indicator of C_{r,r'} \ D_eps with inward transitions of
    /// width [`INDICATOR_TRANSITION`], so the support stays inside the
    /// sharp region (the hypotheses r > sqrt(2), eps > 0 remain honest).
    pub fn annulus_minus_tube(r: f64, rp: f64, eps: f64) -> Self {
        let delta = INDICATOR_TRANSITION;
        ScaledProfile {
            eval: Box::new(move |y: &[f64]| {
                let d = y.len() / 2;
                let rho: f64 = y.iter().map(|c| c * c).sum::<f64>().sqrt();
                let rel: f64 = (0..d)
                    .map(|a| (y[a] - y[d + a]) * (y[a] - y[d + a]))
                    .sum::<f64>()
                    .sqrt();
                crate::bump::plateau(rho, r + delta, rp - delta, delta)
                    * crate::bump::transition_up(rel, eps, eps + delta)
            }),
            sup: 1.0,
            diag_clearance: eps,
        }
    }

    /// Smoothed indicator of a region spec (inward transitions), vanishing
    /// on the declared diagonal tube.
    pub fn region(k: &RegionSpec) -> Self {
        let delta = INDICATOR_TRANSITION;
        let kc = k.clone();
        let diag = k.diag_min;
        ScaledProfile {
            eval: Box::new(move |y: &[f64]| {
                let d = y.len() / 2;
                let rel: f64 = (0..d)
                    .map(|a| (y[a] - y[d + a]) * (y[a] - y[d + a]))
                    .sum::<f64>()
                    .sqrt();
                let diag_factor =
                    crate::bump::transition_up(rel, kc.diag_min, kc.diag_min + delta);
                let radial: f64 = kc
                    .parts
                    .iter()
                    .map(|p| match p {
                        crate::graf::RegionPart::Annulus { r1, r2 } => {
                            let rho: f64 = y.iter().map(|c| c * c).sum::<f64>().sqrt();
                            if *r1 <= 0.0 {
                                crate::bump::transition_down(rho, r2 - delta, *r2)
                            } else {
                                crate::bump::plateau(rho, r1 + delta, r2 - delta, delta)
                            }
                        }
                        crate::graf::RegionPart::Box { lo, hi } => y
                            .iter()
                            .zip(lo.iter().zip(hi.iter()))
                            .map(|(c, (a, b))| {
                                crate::bump::plateau(*c, a + delta, b - delta, delta)
                            })
                            .product(),
                    })
                    .fold(0.0, f64::max);
                radial * diag_factor
            }),
            sup: 1.0,
            diag_clearance: diag,
        }
    }

    /// Graf function R(x~/t) as a profile (bilinear interpolation of the
    /// built samples).
    pub fn graf_r(gf: &std::sync::Arc<GrafFunction>) -> Self {
        let g = gf.clone();
        let sup = g.peak();
        let diag = 0.5 * g.params.eps;
        ScaledProfile {
            eval: Box::new(move |y: &[f64]| g.value_interp(y[0], y[1])),
            sup,
            diag_clearance: diag,
        }
    }

    /// Component of grad R(x~/t) via the exact convolution evaluator.
    pub fn graf_grad(gf: &std::sync::Arc<GrafFunction>, axis: usize) -> Self {
        let g = gf.clone();
        let opts = g.options.clone();
        let sup = 2.0 * (1.0 + g.params.beta) * g.params.rp;
        let diag = 0.5 * g.params.eps;
        ScaledProfile {
            eval: Box::new(move |y: &[f64]| {
                g.evaluator.eval_point(y[0], y[1], &opts).grad[axis]
            }),
            sup,
            diag_clearance: diag,
        }
    }
}

/// One additive term of an observable: coeff * t^power * product of factors
/// (applied right to left), optionally symmetrized with its adjoint.
pub struct ObservableTerm {
    pub coeff: f64,
    pub t_power: f64,
    pub factors: Vec<Factor>,
    /// replace the product A by (A + A*)/2
    pub hermitize: bool,
}

/// Symbolic propagation observable M(t) = sum of terms.
pub struct PropagationObservable {
    pub terms: Vec<ObservableTerm>,
    pub label: String,
}

impl PropagationObservable {
    pub fn identity(grid: &GridSpec) -> Self {
        let one =
            Multiplier::from_real_symbol(grid, crate::specops::Arity::TwoParticle, |_| 1.0);
        PropagationObservable {
            terms: vec![ObservableTerm {
                coeff: 1.0,
                t_power: 0.0,
                factors: vec![Factor::MomentumMultiplier(one)],
                hermitize: false,
            }],
            label: "identity".into(),
        }
    }

    /// Every transport factor must sit next to a compactly supported
    /// position profile; rejects observables that are unbounded as stated.
    pub fn check_bounded(&self) -> Result<()> {
        for term in &self.terms {
            for (i, f) in term.factors.iter().enumerate() {
                if matches!(f, Factor::Transport { .. }) {
                    let left_ok =
                        i > 0 && matches!(term.factors[i - 1], Factor::PositionProfile(_));
                    let right_ok = i + 1 < term.factors.len()
                        && matches!(term.factors[i + 1], Factor::PositionProfile(_));
                    if !left_ok && !right_ok {
                        return Err(Error::validation(format!(
                            "observable '{}' has a transport factor without an \
                             adjacent localizing profile; unbounded as stated",
                            self.label
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Declared diagonal clearance: the minimum over used position profiles
    /// (0 when any profile does not vanish near the diagonal).
    pub fn diagonal_clearance(&self) -> f64 {
        let mut clearance = f64::INFINITY;
        let mut any = false;
        for term in &self.terms {
            for f in &term.factors {
                if let Factor::PositionProfile(p) = f {
                    any = true;
                    clearance = clearance.min(p.diag_clearance);
                }
            }
        }
        if any {
            clearance
        } else {
            0.0
        }
    }
}

/// Workspace for applying observables along a trajectory.
pub struct ObservableContext {
    pub grid: GridSpec,
    pub m: f64,
    grad: Vec<Multiplier>,
}

impl ObservableContext {
    pub fn new(grid: &GridSpec, m: f64) -> Result<Self> {
        Ok(ObservableContext {
            grid: grid.clone(),
            m,
            grad: grad_omega_tilde_multiplier(grid, m)?,
        })
    }

    fn sample_profile(&self, p: &ScaledProfile, t: f64) -> Vec<f64> {
        let grid = &self.grid;
        let axes = 2 * grid.d;
        let mut out = vec![0.0; grid.len2()];
        let mut idx = vec![0usize; axes];
        let mut y = vec![0.0; axes];
        for (flat, o) in out.iter_mut().enumerate() {
            crate::grid::unravel(flat, grid.n, &mut idx);
            for a in 0..axes {
                y[a] = grid.x_at(idx[a]) / t;
            }
            *o = (p.eval)(&y);
        }
        out
    }

    /// Apply the transport factor (x~_j / t - (grad omega~)_j(D)).
    fn apply_transport(&self, axis: usize, t: f64, field: &Field<2>) -> Result<Field<2>> {
        let pos = crate::grid::to_space(field, Space::Position);
        let grid = &self.grid;
        let axes = 2 * grid.d;
        let mut xpart = pos.clone();
        let mut idx = vec![0usize; axes];
        for (flat, v) in xpart.values.iter_mut().enumerate() {
            crate::grid::unravel(flat, grid.n, &mut idx);
            *v *= grid.x_at(idx[axis]) / t;
        }
        let gpart = crate::specops::apply_multiplier(&self.grad[axis], &pos)?;
        let mut out = xpart;
        out.axpy(Complex64::new(-1.0, 0.0), &gpart)?;
        Ok(out)
    }

    fn apply_factor(&self, f: &Factor, t: f64, field: &Field<2>) -> Result<Field<2>> {
        match f {
            Factor::PositionProfile(p) => {
                let samples = self.sample_profile(p, t);
                let mut out = crate::grid::to_space(field, Space::Position);
                out.multiply_real_samples(&samples);
                Ok(out)
            }
            Factor::MomentumMultiplier(m) => crate::specops::apply_multiplier(m, field),
            Factor::Transport { axis } => self.apply_transport(*axis, t, field),
        }
    }

    /// M(t) applied to a field. Every primitive factor is self-adjoint, so
    /// the adjoint of a product is the reversed product.
    pub fn apply(
        &self,
        m: &PropagationObservable,
        t: f64,
        field: &Field<2>,
    ) -> Result<Field<2>> {
        let mut out = Field::<2>::zeros(&self.grid, Space::Position);
        for term in &m.terms {
            // forward product, right to left
            let mut fwd = field.clone();
            for f in term.factors.iter().rev() {
                fwd = self.apply_factor(f, t, &fwd)?;
            }
            let w = term.coeff * t.powf(term.t_power);
            if term.hermitize {
                // adjoint: factors in original order
                let mut adj = field.clone();
                for f in term.factors.iter() {
                    adj = self.apply_factor(f, t, &adj)?;
                }
                let mut sym = crate::grid::to_space(&fwd, Space::Position);
                sym.axpy(
                    Complex64::new(1.0, 0.0),
                    &crate::grid::to_space(&adj, Space::Position),
                )?;
                sym.scale(0.5 * w);
                out.axpy(Complex64::new(1.0, 0.0), &sym)?;
            } else {
                let mut term_val = crate::grid::to_space(&fwd, Space::Position);
                term_val.scale(w);
                out.axpy(Complex64::new(1.0, 0.0), &term_val)?;
            }
        }
        Ok(out)
    }

    /// <u, M(t) u>.
    pub fn expectation(
        &self,
        m: &PropagationObservable,
        t: f64,
        field: &Field<2>,
    ) -> Result<Complex64> {
        let mu = self.apply(m, t, field)?;
        inner_product(&crate::grid::to_space(field, Space::Position), &mu)
    }
}

/// Large-velocity integrand || chi_{C_{r,r'} \ D_eps}(x~/t) F_t ||^2 over the
/// trajectory snapshots, with the running dt/t integral.
pub fn large_velocity_series(
    traj: &Trajectory,
    r: f64,
    rp: f64,
    eps: f64,
) -> Result<DiagnosticSeries> {
    if r <= std::f64::consts::SQRT_2 {
        return Err(Error::validation(format!(
            "large-velocity region needs r > sqrt(2), got r = {r}"
        )));
    }
    if !(rp > r && eps > 0.0) {
        return Err(Error::validation("need r' > r and eps > 0"));
    }
    let profile = ScaledProfile::annulus_minus_tube(r, rp, eps);
    let grid = traj.grid().clone();
    let axes = 2 * grid.d;
    let mut times = Vec::new();
    let mut vals = Vec::new();
    for (t, u) in &traj.snapshots {
        let mut cut = crate::grid::to_space(u, Space::Position);
        let mut idx = vec![0usize; axes];
        let mut y = vec![0.0; axes];
        for (flat, v) in cut.values.iter_mut().enumerate() {
            crate::grid::unravel(flat, grid.n, &mut idx);
            for a in 0..axes {
                y[a] = grid.x_at(idx[a]) / t;
            }
            *v *= (profile.eval)(&y);
        }
        times.push(*t);
        vals.push(cut.norm_sqr());
    }
    Ok(DiagnosticSeries::from_samples(times, vals))
}

/// Result of the phase-space integrand sweep.
#[derive(Debug, Serialize)]
pub struct PhaseSpaceSeries {
    pub series: DiagnosticSeries,
    /// || (A B - B A) u || per snapshot for the two factor orderings.
    pub ordering_discrepancy: DiagnosticSeries,
    pub discrepancy_slope: Option<f64>,
}

/// Phase-space integrand || 1_K(x~/t) (x~/t - grad omega~) F_t ||^2 with the
/// symmetrized ordering (average of both orderings per axis).
pub fn phase_space_series(
    ctx: &ObservableContext,
    traj: &Trajectory,
    k: &RegionSpec,
) -> Result<PhaseSpaceSeries> {
    k.validate()?;
    let profile = ScaledProfile::region(k);
    let axes = 2 * ctx.grid.d;
    let mut times = Vec::new();
    let mut vals = Vec::new();
    let mut disc = Vec::new();
    for (t, u) in &traj.snapshots {
        let samples = ctx.sample_profile(&profile, *t);
        let pos = crate::grid::to_space(u, Space::Position);
        let mut total = 0.0;
        let mut dtot = 0.0;
        for axis in 0..axes {
            let tu = ctx.apply_transport(axis, *t, &pos)?;
            let mut a = tu.clone();
            a.multiply_real_samples(&samples);
            let mut cu = pos.clone();
            cu.multiply_real_samples(&samples);
            let b = ctx.apply_transport(axis, *t, &cu)?;
            let mut sym = a.clone();
            sym.axpy(Complex64::new(1.0, 0.0), &b)?;
            sym.scale(0.5);
            total += sym.norm_sqr();
            dtot += l2_distance(&a, &b)?.powi(2);
        }
        times.push(*t);
        vals.push(total);
        disc.push(dtot.sqrt());
    }
    let series = DiagnosticSeries::from_samples(times.clone(), vals);
    let ordering_discrepancy = DiagnosticSeries::from_samples(times, disc);
    let t_end = *ordering_discrepancy.times.last().unwrap();
    let slope = ordering_discrepancy.fitted_loglog_slope(t_end / 20.0, t_end, 1e-300);
    Ok(PhaseSpaceSeries {
        series,
        ordering_discrepancy,
        discrepancy_slope: slope,
    })
}

/// Free-evolution phase-space bound report.
#[derive(Debug, Serialize)]
pub struct FreeBoundReport {
    pub integral: f64,
    pub norm_sqr: f64,
    /// C_measured = integral / ||u0||^2
    pub c_measured: f64,
}

/// Integral over [1, T] of
/// || 1_K(x~/t)(x~/t - grad omega~) e^{-it omega~} u0 ||^2 dt/t
/// and its ratio to ||u0||^2.
pub fn free_phase_space_bound(
    ctx: &ObservableContext,
    engine: &Propagator2P,
    u0: &Field<2>,
    k: &RegionSpec,
    t_end: f64,
    samples: usize,
) -> Result<FreeBoundReport> {
    k.validate()?;
    let profile = ScaledProfile::region(k);
    let times = crate::series::log_times(1.0, t_end, samples.max(2));
    let mut vals = Vec::with_capacity(times.len());
    let mut state = crate::grid::to_space(u0, Space::Position);
    let mut t_prev = 0.0; // u0 is the t = 0 data here
    let axes = 2 * ctx.grid.d;
    for &t in &times {
        engine.step_free(&mut state, t - t_prev)?;
        t_prev = t;
        let samples_t = ctx.sample_profile(&profile, t);
        let mut total = 0.0;
        for axis in 0..axes {
            let mut a = ctx.apply_transport(axis, t, &state)?;
            a.multiply_real_samples(&samples_t);
            total += a.norm_sqr();
        }
        vals.push(total);
    }
    let series = DiagnosticSeries::from_samples(times, vals);
    let n2 = u0.norm_sqr();
    Ok(FreeBoundReport {
        integral: series.total(),
        norm_sqr: n2,
        c_measured: if n2 > 0.0 { series.total() / n2 } else { 0.0 },
    })
}

/// d/dt <u(t), M(t) u(t)> at a snapshot time, estimated from centered
/// re-stepping of the stored state (no commutator is ever formed).
pub fn heisenberg_increment(
    ctx: &ObservableContext,
    engine: &Propagator2P,
    m: &PropagationObservable,
    traj: &Trajectory,
    t: f64,
    dt: f64,
) -> Result<f64> {
    let u = traj.snapshot_at(t)?;
    let up = advance(engine, &traj.source, u, t, dt)?;
    let um = advance(engine, &traj.source, u, t, -dt)?;
    let qp = ctx.expectation(m, t + dt, &up)?.re;
    let qm = ctx.expectation(m, t - dt, &um)?.re;
    Ok((qp - qm) / (2.0 * dt))
}

/// Bookkeeping monitor over a trajectory.
#[derive(Debug, Serialize)]
pub struct MonitorA1Report {
    /// Q(T) - Q(t0)
    pub boundary_difference: f64,
    /// trapezoid integral of the centered-difference dQ/dt samples
    pub integral_of_derivative: f64,
    pub closure_error: f64,
    /// refinement-based estimate of the quadrature + re-stepping error
    pub closure_tolerance: f64,
    /// integral of || B(t) u(t) ||^2 dt for the target factor
    pub target_integral: f64,
    /// bound implied by the identity: boundary terms + C_j integrals +
    /// source contributions + closure allowance
    pub target_bound: f64,
    pub source_contribution: f64,
    pub bounded_sup: f64,
}

/// Verify the integrated Heisenberg identity along the trajectory and
/// report the propagation-estimate integral against its implied bound.
///
/// The derivative samples are centered differences of the quadratic form
/// along the trajectory; the identity integral uses the trapezoid rule over
/// snapshot times. The closure tolerance is estimated from a coarse / fine
/// quadrature comparison plus the re-stepping error scale.
pub fn monitor_a1(
    ctx: &ObservableContext,
    engine: &Propagator2P,
    m: &PropagationObservable,
    traj: &Trajectory,
    b_target: &PropagationObservable,
    c_list: &[&PropagationObservable],
) -> Result<MonitorA1Report> {
    m.check_bounded()?;
    b_target.check_bounded()?;
    let has_source = !matches!(traj.source, crate::dynamics::SourceModel::None);
    if has_source && m.diagonal_clearance() <= 0.0 {
        return Err(Error::validation(
            "sourced runs require observables vanishing near the diagonal",
        ));
    }
    let dt_fd = traj.config.dt;
    let times: Vec<f64> = traj.snapshots.iter().map(|(t, _)| *t).collect();
    let t0 = times[0];
    let t_end = *times.last().unwrap();

    let q0 = ctx.expectation(m, t0, traj.snapshot_at(t0)?)?.re;
    let q1 = ctx.expectation(m, t_end, traj.snapshot_at(t_end)?)?.re;

    let mut dq = Vec::with_capacity(times.len());
    let mut src_terms = Vec::with_capacity(times.len());
    let mut b_vals = Vec::with_capacity(times.len());
    let mut c_vals = vec![Vec::with_capacity(times.len()); c_list.len()];
    for (t, u) in &traj.snapshots {
        dq.push(heisenberg_increment(ctx, engine, m, traj, *t, dt_fd)?);
        let r = source_at(engine, traj, *t)?;
        let mu = ctx.apply(m, *t, u)?;
        src_terms.push(2.0 * inner_product(&mu, &r)?.re);
        let bu = ctx.apply(b_target, *t, u)?;
        b_vals.push(bu.norm_sqr());
        for (ci, c) in c_list.iter().enumerate() {
            let cu = ctx.apply(c, *t, u)?;
            c_vals[ci].push(cu.norm_sqr());
        }
    }

    let trapz = |ys: &[f64]| -> f64 {
        let mut acc = 0.0;
        for i in 1..times.len() {
            acc += 0.5 * (ys[i] + ys[i - 1]) * (times[i] - times[i - 1]);
        }
        acc
    };
    let integral_of_derivative = trapz(&dq);
    // coarse quadrature (every other sample) for a Richardson error estimate
    let coarse = {
        let mut acc = 0.0;
        let mut last = 0usize;
        let mut i = 2usize;
        while i < times.len() {
            acc += 0.5 * (dq[i] + dq[last]) * (times[i] - times[last]);
            last = i;
            i += 2;
        }
        if last != times.len() - 1 {
            let i = times.len() - 1;
            acc += 0.5 * (dq[i] + dq[last]) * (times[i] - times[last]);
        }
        acc
    };
    let quad_err = (integral_of_derivative - coarse).abs() / 3.0;
    let fd_scale = dq.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let closure_tolerance = quad_err
        + fd_scale * dt_fd * dt_fd * (t_end - t0).sqrt()
        + 1e-12 * q0.abs().max(q1.abs()).max(1.0);

    let boundary_difference = q1 - q0;
    let closure_error = (boundary_difference - integral_of_derivative).abs();

    let source_contribution = trapz(&src_terms);
    let target_integral = trapz(&b_vals);
    let c_total: f64 = c_vals.iter().map(|cv| trapz(cv)).sum();
    let target_bound =
        boundary_difference - source_contribution + c_total + closure_error + closure_tolerance;

    let mut sup = 0.0;
    for term in &m.terms {
        let mut prod = term.coeff.abs() * t_end.powf(term.t_power.max(0.0));
        for f in &term.factors {
            prod *= match f {
                Factor::PositionProfile(p) => p.sup,
                Factor::MomentumMultiplier(mm) => mm.sup_norm(),
                Factor::Transport { .. } => 1.0, // bounded through the neighbor profile
            };
        }
        sup += prod;
    }

    Ok(MonitorA1Report {
        boundary_difference,
        integral_of_derivative,
        closure_error,
        closure_tolerance,
        target_integral,
        target_bound,
        source_contribution,
        bounded_sup: sup,
    })
}

/// Scalar-limit monitor: the series <u(t), M(t) u(t)> with its Cauchy tail.
#[derive(Debug, Serialize)]
pub struct MonitorA3Report {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub limit_estimate: f64,
    /// sup over pairs t, t' >= T/2 of |Q(t) - Q(t')|
    pub cauchy_tail: f64,
}

pub fn monitor_a3(
    ctx: &ObservableContext,
    m: &PropagationObservable,
    traj: &Trajectory,
) -> Result<MonitorA3Report> {
    m.check_bounded()?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (t, u) in &traj.snapshots {
        times.push(*t);
        values.push(ctx.expectation(m, *t, u)?.re);
    }
    let t_end = *times.last().unwrap();
    let tail_vals: Vec<f64> = times
        .iter()
        .zip(&values)
        .filter(|(t, _)| **t >= 0.5 * t_end)
        .map(|(_, v)| *v)
        .collect();
    let hi = tail_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = tail_vals.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(MonitorA3Report {
        limit_estimate: *values.last().unwrap(),
        cauchy_tail: hi - lo,
        times,
        values,
    })
}

/// Vector-limit monitor: G(t) = e^{it omega~(D)} M(t) u(t).
#[derive(Debug)]
pub struct MonitorA2Report {
    pub final_vector: Field<2>,
    pub times: Vec<f64>,
    /// || G(t) - G(T) || per recorded time
    pub tail_history: Vec<f64>,
    pub cauchy_tail: f64,
}

pub fn monitor_a2(
    ctx: &ObservableContext,
    engine: &Propagator2P,
    m: &PropagationObservable,
    traj: &Trajectory,
) -> Result<MonitorA2Report> {
    m.check_bounded()?;
    let (t_end, u_end) = traj.snapshots.last().unwrap();
    let mut g_final = ctx.apply(m, *t_end, u_end)?;
    engine.step_free(&mut g_final, -*t_end)?; // e^{+it omega~} = step by -t
    let mut times = Vec::new();
    let mut tails = Vec::new();
    for (t, u) in &traj.snapshots {
        let mut g = ctx.apply(m, *t, u)?;
        engine.step_free(&mut g, -*t)?;
        times.push(*t);
        tails.push(l2_distance(&g, &g_final)?);
    }
    let cauchy_tail = times
        .iter()
        .zip(&tails)
        .filter(|(t, _)| **t >= 0.5 * *t_end)
        .map(|(_, v)| *v)
        .fold(0.0, f64::max);
    Ok(MonitorA2Report {
        final_vector: g_final,
        times,
        tail_history: tails,
        cauchy_tail,
    })
}

/// The Graf-driven observable
/// M(t) = R(x~/t) - 1/2 (grad R(x~/t) . (x~/t - grad omega~) + h.c.).
pub fn graf_observable(
    gf: &std::sync::Arc<GrafFunction>,
    grid: &GridSpec,
) -> Result<PropagationObservable> {
    if grid.d != 1 {
        return Err(Error::validation(
            "the Graf observable is built for d = 1 (two scaled axes)",
        ));
    }
    let mut terms = vec![ObservableTerm {
        coeff: 1.0,
        t_power: 0.0,
        factors: vec![Factor::PositionProfile(ScaledProfile::graf_r(gf))],
        hermitize: false,
    }];
    for axis in 0..2 {
        terms.push(ObservableTerm {
            coeff: -0.5,
            t_power: 0.0,
            factors: vec![
                Factor::PositionProfile(ScaledProfile::graf_grad(gf, axis)),
                Factor::Transport { axis },
            ],
            hermitize: true,
        });
    }
    Ok(PropagationObservable {
        terms,
        label: "graf-transport".into(),
    })
}

/// The observable (x~/t - grad omega~) . G~(x~/t) (x~/t - grad omega~) for a
/// nonnegative region profile vanishing near the diagonal.
pub fn transport_weighted_observable(
    profile_source: &RegionSpec,
) -> Result<PropagationObservable> {
    profile_source.validate()?;
    let mut terms = Vec::new();
    for axis in 0..2 {
        terms.push(ObservableTerm {
            coeff: 1.0,
            t_power: 0.0,
            factors: vec![
                Factor::Transport { axis },
                Factor::PositionProfile(ScaledProfile::region(profile_source)),
                Factor::Transport { axis },
            ],
            hermitize: false,
        });
    }
    Ok(PropagationObservable {
        terms,
        label: "transport-weighted".into(),
    })
}

/// Detector-product observable H(x~/t).
pub fn detector_observable(cut: &Cutoff2P, d: usize) -> PropagationObservable {
    PropagationObservable {
        terms: vec![ObservableTerm {
            coeff: 1.0,
            t_power: 0.0,
            factors: vec![Factor::PositionProfile(ScaledProfile::from_cutoff2p(
                cut, d,
            ))],
            hermitize: false,
        }],
        label: "detector".into(),
    }
}

/// Fitted slope helper for exported series.
pub fn series_slope(series: &DiagnosticSeries) -> Option<f64> {
    let pts: Vec<(f64, f64)> = series
        .times
        .iter()
        .zip(&series.integrand)
        .filter(|(_, v)| **v > 0.0)
        .map(|(t, v)| (t.ln(), v.ln()))
        .collect();
    fit_slope(&pts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{EvolutionConfig, SnapshotSchedule, SourceModel};
    use crate::grid::make_grid;
    use num_complex::Complex64 as C;

    fn band_limited_state(grid: &GridSpec, p1: f64, p2: f64, x1: f64, x2: f64) -> Field<2> {
        let bound = (2.0 / 3.0) * grid.p_max();
        let mut f = Field::<2>::from_fn(grid, Space::Momentum, |p| {
            let win = crate::bump::bump(p[0] / bound) * crate::bump::bump(p[1] / bound);
            let prof = (-(p[0] - p1).powi(2) * 6.0 - (p[1] - p2).powi(2) * 6.0).exp();
            let phase = -p[0] * x1 - p[1] * x2;
            C::from_polar(win * prof, phase)
        });
        let n = f.l2_norm();
        f.scale(1.0 / n);
        crate::grid::fourier_inverse(&f)
    }

    #[test]
    fn large_velocity_rejects_small_r() {
        let g = make_grid(1, 16, 8.0).unwrap();
        let eng = Propagator2P::new(&g, 1.0).unwrap();
        let f = band_limited_state(&g, 0.5, -0.5, -2.0, 2.0);
        let cfg = EvolutionConfig {
            t_start: 1.0,
            t_end: 4.0,
            dt: 0.5,
            schedule: SnapshotSchedule {
                log_count: 4,
                linear: vec![],
                dyadic: false,
            },
            wraparound_tolerance: 0.9,
            ..Default::default()
        };
        let traj = eng.run(&f, &SourceModel::None, &cfg, &mut []).unwrap();
        assert!(large_velocity_series(&traj, 1.0, 3.0, 0.3).is_err());
        assert!(large_velocity_series(&traj, 1.6, 3.0, 0.3).is_ok());
    }

    #[test]
    fn zero_field_gives_zero_series() {
        let g = make_grid(1, 16, 8.0).unwrap();
        let eng = Propagator2P::new(&g, 1.0).unwrap();
        let f = Field::<2>::zeros(&g, Space::Position);
        let cfg = EvolutionConfig {
            t_start: 1.0,
            t_end: 4.0,
            dt: 0.5,
            schedule: SnapshotSchedule {
                log_count: 3,
                linear: vec![],
                dyadic: false,
            },
            wraparound_tolerance: 1.0,
            ..Default::default()
        };
        let traj = eng.run(&f, &SourceModel::None, &cfg, &mut []).unwrap();
        let s = large_velocity_series(&traj, 1.6, 3.0, 0.3).unwrap();
        assert!(s.integrand.iter().all(|v| *v == 0.0));
        let ctx = ObservableContext::new(&g, 1.0).unwrap();
        let k = RegionSpec::annulus_minus_tube(1.0, 2.0, 0.5).unwrap();
        let ps = phase_space_series(&ctx, &traj, &k).unwrap();
        assert!(ps.series.integrand.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn free_bound_scaling_quadratic() {
        let g = make_grid(1, 32, 20.0).unwrap();
        let eng = Propagator2P::new(&g, 1.0).unwrap();
        let ctx = ObservableContext::new(&g, 1.0).unwrap();
        let k = RegionSpec::annulus_minus_tube(1.0, 2.0, 0.5).unwrap();
        let u0 = band_limited_state(&g, 0.8, -0.8, -2.0, 2.0);
        let rep1 = free_phase_space_bound(&ctx, &eng, &u0, &k, 8.0, 8).unwrap();
        let mut u2 = u0.clone();
        u2.scale(2.0);
        let rep2 = free_phase_space_bound(&ctx, &eng, &u2, &k, 8.0, 8).unwrap();
        assert!(
            (rep2.integral - 4.0 * rep1.integral).abs() < 1e-9 * rep2.integral.max(1e-30)
        );
        let z = Field::<2>::zeros(&g, Space::Position);
        let rep0 = free_phase_space_bound(&ctx, &eng, &z, &k, 8.0, 8).unwrap();
        assert_eq!(rep0.integral, 0.0);
    }

    #[test]
    fn heisenberg_increment_conserved_quantities() {
        let g = make_grid(1, 32, 20.0).unwrap();
        let eng = Propagator2P::new(&g, 1.0).unwrap();
        let ctx = ObservableContext::new(&g, 1.0).unwrap();
        let f = band_limited_state(&g, 0.7, -0.7, -3.0, 3.0);
        let cfg = EvolutionConfig {
            t_start: 1.0,
            t_end: 9.0,
            dt: 0.25,
            schedule: SnapshotSchedule {
                log_count: 5,
                linear: vec![5.0],
                dyadic: false,
            },
            wraparound_tolerance: 1e-4,
            exact_free_jumps: false,
            ..Default::default()
        };
        let traj = eng.run(&f, &SourceModel::None, &cfg, &mut []).unwrap();
        let ident = PropagationObservable::identity(&g);
        let d = heisenberg_increment(&ctx, &eng, &ident, &traj, 5.0, 0.25).unwrap();
        assert!(d.abs() < 1e-10, "identity increment {d}");
        let mom = PropagationObservable {
            terms: vec![ObservableTerm {
                coeff: 1.0,
                t_power: 0.0,
                factors: vec![Factor::MomentumMultiplier(Multiplier::from_real_symbol(
                    &g,
                    crate::specops::Arity::TwoParticle,
                    |p| (0.4 * p[0]).cos() + (0.3 * p[1]).sin(),
                ))],
                hermitize: false,
            }],
            label: "momentum".into(),
        };
        let d = heisenberg_increment(&ctx, &eng, &mom, &traj, 5.0, 0.25).unwrap();
        assert!(d.abs() < 1e-10, "momentum-multiplier increment {d}");
    }

    #[test]
    fn monitor_a1_telescopes_for_constant_multiplier() {
        let g = make_grid(1, 32, 20.0).unwrap();
        let eng = Propagator2P::new(&g, 1.0).unwrap();
        let ctx = ObservableContext::new(&g, 1.0).unwrap();
        let f = band_limited_state(&g, 0.7, -0.7, -3.0, 3.0);
        let cfg = EvolutionConfig {
            t_start: 1.0,
            t_end: 9.0,
            dt: 0.25,
            schedule: SnapshotSchedule {
                log_count: 33,
                linear: vec![],
                dyadic: false,
            },
            wraparound_tolerance: 1e-4,
            exact_free_jumps: false,
            ..Default::default()
        };
        let traj = eng.run(&f, &SourceModel::None, &cfg, &mut []).unwrap();
        let mom = PropagationObservable {
            terms: vec![ObservableTerm {
                coeff: 1.0,
                t_power: 0.0,
                factors: vec![Factor::MomentumMultiplier(Multiplier::from_real_symbol(
                    &g,
                    crate::specops::Arity::TwoParticle,
                    |p| 1.0 + 0.2 * (0.4 * p[0]).cos(),
                ))],
                hermitize: false,
            }],
            label: "const-mult".into(),
        };
        let rep = monitor_a1(&ctx, &eng, &mom, &traj, &mom, &[]).unwrap();
        assert!(rep.boundary_difference.abs() < 1e-8);
        assert!(rep.closure_error < 1e-8, "closure {}", rep.closure_error);
        let z = Field::<2>::zeros(&g, Space::Position);
        let traj0 = eng.run(&z, &SourceModel::None, &cfg, &mut []).unwrap();
        let rep0 = monitor_a1(&ctx, &eng, &mom, &traj0, &mom, &[]).unwrap();
        assert_eq!(rep0.target_integral, 0.0);
    }

    #[test]
    fn monitor_a3_constant_for_identity() {
        let g = make_grid(1, 32, 20.0).unwrap();
        let eng = Propagator2P::new(&g, 1.0).unwrap();
        let ctx = ObservableContext::new(&g, 1.0).unwrap();
        let f = band_limited_state(&g, 0.7, -0.7, -3.0, 3.0);
        let cfg = EvolutionConfig {
            t_start: 1.0,
            t_end: 16.0,
            dt: 0.5,
            schedule: SnapshotSchedule {
                log_count: 6,
                linear: vec![],
                dyadic: true,
            },
            wraparound_tolerance: 1e-4,
            ..Default::default()
        };
        let traj = eng.run(&f, &SourceModel::None, &cfg, &mut []).unwrap();
        let ident = PropagationObservable::identity(&g);
        let rep = monitor_a3(&ctx, &ident, &traj).unwrap();
        assert!(rep.cauchy_tail < 1e-12, "tail {}", rep.cauchy_tail);
        assert!((rep.limit_estimate - 1.0).abs() < 1e-10);
    }

    #[test]
    fn monitor_a2_identity_constant_vector() {
        let g = make_grid(1, 32, 20.0).unwrap();
        let eng = Propagator2P::new(&g, 1.0).unwrap();
        let ctx = ObservableContext::new(&g, 1.0).unwrap();
        let f = band_limited_state(&g, 0.7, -0.7, -3.0, 3.0);
        let cfg = EvolutionConfig {
            t_start: 1.0,
            t_end: 16.0,
            dt: 0.5,
            schedule: SnapshotSchedule {
                log_count: 6,
                linear: vec![],
                dyadic: true,
            },
            wraparound_tolerance: 1e-4,
            ..Default::default()
        };
        let traj = eng.run(&f, &SourceModel::None, &cfg, &mut []).unwrap();
        let ident = PropagationObservable::identity(&g);
        let rep = monitor_a2(&ctx, &eng, &ident, &traj).unwrap();
        assert!(rep.cauchy_tail < 1e-12, "tail {}", rep.cauchy_tail);
        let z = Field::<2>::zeros(&g, Space::Position);
        let traj0 = eng.run(&z, &SourceModel::None, &cfg, &mut []).unwrap();
        let rep0 = monitor_a2(&ctx, &eng, &ident, &traj0).unwrap();
        assert_eq!(rep0.final_vector.l2_norm(), 0.0);
    }

    #[test]
    fn unbounded_observable_rejected() {
        let bad = PropagationObservable {
            terms: vec![ObservableTerm {
                coeff: 1.0,
                t_power: 0.0,
                factors: vec![Factor::Transport { axis: 0 }],
                hermitize: false,
            }],
            label: "bare transport".into(),
        };
        assert!(bad.check_bounded().is_err());
    }
}
