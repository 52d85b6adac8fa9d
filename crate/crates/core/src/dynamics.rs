//! Time evolution of two-particle amplitudes under
//! d/dt u = -i omega~(D) u + r(t), covering the source-free case, the
//! dispersive pair-potential model, and user-supplied source samplers.

use std::collections::BTreeSet;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::detectors::Cutoff2P;
use crate::error::{Error, Result};
use crate::grid::{unravel, Field, GridSpec, Space};
use crate::specops::{omega_tilde_multiplier, FreePropagator, Multiplier};

/// Pair interaction as a function of the relative coordinate x1 - x2
/// (minimal-image on the periodic box).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum PotentialSpec {
    /// V(y) = coupling * exp(-y^2 / (2 width^2))
    Gaussian { coupling: f64, width: f64 },
    /// Explicit samples over the relative-coordinate lattice (length n^d,
    /// indexed like a one-particle position field).
    Sampled { values: Vec<f64> },
}

impl PotentialSpec {
    fn eval(&self, rel: &[f64], grid: &GridSpec) -> f64 {
        match self {
            PotentialSpec::Gaussian { coupling, width } => {
                let r2: f64 = rel.iter().map(|c| c * c).sum();
                coupling * (-r2 / (2.0 * width * width)).exp()
            }
            PotentialSpec::Sampled { values } => {
                // nearest lattice point of the relative coordinate
                let n = grid.n;
                let mut flat = 0usize;
                for c in rel {
                    let j = (((c + grid.box_half_length) / grid.dx()).round() as isize)
                        .rem_euclid(n as isize) as usize;
                    flat = flat * n + j;
                }
                values[flat]
            }
        }
    }

    pub fn peak(&self, grid: &GridSpec) -> f64 {
        match self {
            PotentialSpec::Gaussian { coupling, .. } => coupling.abs(),
            PotentialSpec::Sampled { values } => {
                let _ = grid;
                values.iter().map(|v| v.abs()).fold(0.0, f64::max)
            }
        }
    }

    /// Largest |V| at relative separations of at least `dist`.
    pub fn max_beyond(&self, dist: f64, grid: &GridSpec) -> f64 {
        match self {
            PotentialSpec::Gaussian { coupling, width } => {
                coupling.abs() * (-dist * dist / (2.0 * width * width)).exp()
            }
            PotentialSpec::Sampled { values } => {
                let n = grid.n;
                let d = grid.d;
                let mut idx = vec![0usize; d];
                let mut best = 0.0f64;
                for (flat, v) in values.iter().enumerate() {
                    unravel(flat, n, &mut idx);
                    let r2: f64 = idx
                        .iter()
                        .map(|&j| {
                            let y = grid.x_at(j);
                            y * y
                        })
                        .sum();
                    if r2.sqrt() >= dist {
                        best = best.max(v.abs());
                    }
                }
                best
            }
        }
    }
}

/// Source term families for the inhomogeneous evolution equation.
#[derive(Clone)]
pub enum SourceModel {
    None,
    PairPotential(PotentialSpec),
    Tabulated(Arc<dyn SourceFn>),
}

impl std::fmt::Debug for SourceModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SourceModel::None => write!(f, "None"),
            SourceModel::PairPotential(p) => write!(f, "PairPotential({p:?})"),
            SourceModel::Tabulated(_) => write!(f, "Tabulated(..)"),
        }
    }
}

/// User-supplied source sampler r(t).
pub trait SourceFn: Send + Sync {
    fn sample(&self, t: f64, grid: &GridSpec) -> Field<2>;
}

impl<F> SourceFn for F
where
    F: Fn(f64, &GridSpec) -> Field<2> + Send + Sync,
{
    fn sample(&self, t: f64, grid: &GridSpec) -> Field<2> {
        self(t, grid)
    }
}

/// Integration scheme for sourced runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Strang,
    DuhamelMidpoint,
}

/// Snapshot schedule specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnapshotSchedule {
    /// Number of log-spaced snapshot times over [t_start, t_end]; 0 disables.
    pub log_count: usize,
    /// Extra explicit times.
    #[serde(default)]
    pub linear: Vec<f64>,
    /// Include dyadic checkpoints t_start * 2^k.
    #[serde(default)]
    pub dyadic: bool,
}

impl Default for SnapshotSchedule {
    fn default() -> Self {
        SnapshotSchedule {
            log_count: 41,
            linear: Vec::new(),
            dyadic: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvolutionConfig {
    /// Start time; the diagnostics integrals start at t = 1 by convention.
    pub t_start: f64,
    pub t_end: f64,
    pub dt: f64,
    pub scheme: Scheme,
    pub schedule: SnapshotSchedule,
    /// Abort threshold on the norm fraction within 5% of the box edge.
    pub wraparound_tolerance: f64,
    /// Jump exactly between snapshots when the run is source-free.
    pub exact_free_jumps: bool,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            t_start: 1.0,
            t_end: 400.0,
            dt: 0.1,
            scheme: Scheme::Strang,
            schedule: SnapshotSchedule::default(),
            wraparound_tolerance: 1e-10,
            exact_free_jumps: true,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_start > 0.0) {
            return Err(Error::validation("t_start must be positive"));
        }
        if !(self.t_end > self.t_start) {
            return Err(Error::validation("t_end must exceed t_start"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::validation("dt must be positive"));
        }
        for &t in &self.schedule.linear {
            if t < self.t_start - 1e-12 || t > self.t_end + 1e-12 {
                return Err(Error::validation(format!(
                    "snapshot time {t} outside [{}, {}]",
                    self.t_start, self.t_end
                )));
            }
        }
        if !(self.wraparound_tolerance > 0.0) {
            return Err(Error::validation("wraparound tolerance must be positive"));
        }
        Ok(())
    }

    /// Snapshot times snapped onto the step lattice t_start + k*dt.
    pub fn snapshot_times(&self) -> Vec<f64> {
        let mut steps: BTreeSet<u64> = BTreeSet::new();
        let total_steps = ((self.t_end - self.t_start) / self.dt).round().max(1.0) as u64;
        let mut add_time = |t: f64| {
            let k = ((t - self.t_start) / self.dt).round();
            let k = k.clamp(0.0, total_steps as f64) as u64;
            steps.insert(k);
        };
        add_time(self.t_start);
        add_time(self.t_end);
        if self.schedule.log_count >= 2 {
            for t in crate::series::log_times(self.t_start, self.t_end, self.schedule.log_count) {
                add_time(t);
            }
        }
        for &t in &self.schedule.linear {
            add_time(t);
        }
        if self.schedule.dyadic {
            let mut t = self.t_start;
            while t <= self.t_end {
                add_time(t);
                t *= 2.0;
            }
        }
        steps
            .into_iter()
            .map(|k| self.t_start + k as f64 * self.dt)
            .collect()
    }
}

/// Per-step scalar record.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepRecord {
    pub t: f64,
    pub norm: f64,
    pub boundary_mass: f64,
}

/// Stored evolution history.
#[derive(Debug)]
pub struct Trajectory {
    pub config: EvolutionConfig,
    pub m: f64,
    pub source: SourceModel,
    pub snapshots: Vec<(f64, Field<2>)>,
    pub step_log: Vec<StepRecord>,
    pub steps_taken: u64,
}

impl Trajectory {
    /// Snapshot at time t (within half a step).
    pub fn snapshot_at(&self, t: f64) -> Result<&Field<2>> {
        let tol = (0.5 * self.config.dt).max(1e-9 * t.abs());
        self.snapshots
            .iter()
            .find(|(s, _)| (s - t).abs() <= tol)
            .map(|(_, f)| f)
            .ok_or_else(|| Error::validation(format!("no snapshot at t = {t}")))
    }

    pub fn final_time(&self) -> f64 {
        self.snapshots.last().map(|(t, _)| *t).unwrap_or(0.0)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.snapshots[0].1.grid
    }
}

/// Observer hook invoked after every accepted step (and once at t_start).
pub trait StepObserver {
    fn observe(&mut self, t: f64, field: &Field<2>, engine: &Propagator2P);
}

/// Spectral stepper for the two-particle dispersion, with a cached phase
/// table for the most recent step size.
pub struct Propagator2P {
    pub grid: GridSpec,
    pub m: f64,
    pub omega_tilde: Multiplier,
    cached_dt: std::sync::Mutex<Option<(f64, FreePropagator)>>,
}

impl Propagator2P {
    pub fn new(grid: &GridSpec, m: f64) -> Result<Self> {
        Ok(Propagator2P {
            grid: grid.clone(),
            m,
            omega_tilde: omega_tilde_multiplier(grid, m)?,
            cached_dt: std::sync::Mutex::new(None),
        })
    }

    fn with_propagator<T>(
        &self,
        dt: f64,
        f: impl FnOnce(&FreePropagator) -> Result<T>,
    ) -> Result<T> {
        {
            let cache = self.cached_dt.lock().unwrap();
            if let Some((cdt, prop)) = cache.as_ref() {
                if *cdt == dt {
                    return f(prop);
                }
            }
        }
        let prop = FreePropagator::new(&self.omega_tilde, dt)?;
        let out = f(&prop);
        *self.cached_dt.lock().unwrap() = Some((dt, prop));
        out
    }

    /// Exact spectral application of e^{-i dt omega~(D)}.
    pub fn step_free(&self, field: &mut Field<2>, dt: f64) -> Result<()> {
        if dt == 0.0 {
            return Ok(());
        }
        self.with_propagator(dt, |p| p.apply_in_place(field))
    }

    /// Sample V(x1 - x2) over the two-particle lattice (minimal image).
    pub fn potential_samples(&self, v: &PotentialSpec) -> Vec<f64> {
        let grid = &self.grid;
        let d = grid.d;
        let axes = 2 * d;
        let n = grid.n;
        let twol = 2.0 * grid.box_half_length;
        let mut out = vec![0.0; grid.len2()];
        let mut idx = vec![0usize; axes];
        let mut rel = vec![0.0; d];
        for (flat, o) in out.iter_mut().enumerate() {
            unravel(flat, n, &mut idx);
            for a in 0..d {
                let mut diff = grid.x_at(idx[a]) - grid.x_at(idx[d + a]);
                // minimal image on the torus
                if diff >= grid.box_half_length {
                    diff -= twol;
                } else if diff < -grid.box_half_length {
                    diff += twol;
                }
                rel[a] = diff;
            }
            *o = v.eval(&rel, grid);
        }
        out
    }

    /// Check the potential decays below 1e-14 of its peak before half-box
    /// separation.
    pub fn validate_potential(&self, v: &PotentialSpec) -> Result<()> {
        let peak = v.peak(&self.grid);
        if peak == 0.0 {
            return Ok(());
        }
        let far = v.max_beyond(self.grid.box_half_length, &self.grid);
        if far > 1e-14 * peak {
            return Err(Error::validation(format!(
                "pair potential does not decay at half-box separation: \
                 |V| = {far:.3e} vs peak {peak:.3e}; enlarge the box or narrow V"
            )));
        }
        Ok(())
    }

    /// Strang step: e^{-i dt/2 V} e^{-i dt omega~} e^{-i dt/2 V}.
    pub fn step_strang(
        &self,
        field: &mut Field<2>,
        dt: f64,
        half_phase: &[Complex64],
    ) -> Result<()> {
        debug_assert_eq!(field.space, Space::Position);
        for (u, ph) in field.values.iter_mut().zip(half_phase) {
            *u *= ph;
        }
        self.step_free(field, dt)?;
        for (u, ph) in field.values.iter_mut().zip(half_phase) {
            *u *= ph;
        }
        Ok(())
    }

    /// Phase table e^{-i (dt/2) V} for Strang stepping.
    pub fn half_potential_phases(&self, v_samples: &[f64], dt: f64) -> Vec<Complex64> {
        v_samples
            .iter()
            .map(|v| Complex64::from_polar(1.0, -0.5 * dt * v))
            .collect()
    }

    /// Midpoint Duhamel step for a tabulated source:
    /// u(t+dt) = e^{-i dt omega~} u(t) + dt e^{-i dt/2 omega~} r(t + dt/2).
    pub fn step_duhamel(
        &self,
        field: &mut Field<2>,
        t: f64,
        dt: f64,
        source: &dyn SourceFn,
    ) -> Result<()> {
        self.step_free(field, dt)?;
        let mut mid = source.sample(t + 0.5 * dt, &self.grid);
        if mid.space != Space::Position {
            mid = crate::grid::to_space(&mid, Space::Position);
        }
        let half = FreePropagator::new(&self.omega_tilde, 0.5 * dt)?;
        half.apply_in_place(&mut mid)?;
        field.axpy(Complex64::new(dt, 0.0), &mid)?;
        Ok(())
    }

    /// Drive a full run and collect snapshots. Aborts with a guard error
    /// when boundary mass exceeds the configured wraparound tolerance.
    pub fn run(
        &self,
        initial: &Field<2>,
        source: &SourceModel,
        config: &EvolutionConfig,
        observers: &mut [&mut dyn StepObserver],
    ) -> Result<Trajectory> {
        config.validate()?;
        if initial.grid != self.grid {
            return Err(Error::validation("initial data grid mismatch"));
        }
        let mut state = crate::grid::to_space(initial, Space::Position);
        let snapshot_times = config.snapshot_times();
        let mut snapshots: Vec<(f64, Field<2>)> = Vec::with_capacity(snapshot_times.len());
        let mut step_log = Vec::new();
        let mut steps_taken = 0u64;

        let tol = config.wraparound_tolerance;
        let l = self.grid.box_half_length;
        let record = |state: &Field<2>, t: f64, log: &mut Vec<StepRecord>| -> Result<()> {
            let rec = StepRecord {
                t,
                norm: state.l2_norm(),
                boundary_mass: state.boundary_mass_fraction(0.05),
            };
            log.push(rec);
            if rec.boundary_mass > tol {
                return Err(Error::guard(format!(
                    "boundary mass {:.3e} exceeded tolerance {:.3e} at t = {t}; \
                     amplitude is reaching the box edge (L = {l}); enlarge the box \
                     or shorten the run",
                    rec.boundary_mass, tol
                )));
            }
            Ok(())
        };

        record(&state, config.t_start, &mut step_log)?;
        for obs in observers.iter_mut() {
            obs.observe(config.t_start, &state, self);
        }
        snapshots.push((config.t_start, state.clone()));

        let free_jump = matches!(source, SourceModel::None) && config.exact_free_jumps;
        if free_jump {
            for win in snapshot_times.windows(2) {
                let (a, b) = (win[0], win[1]);
                self.step_free(&mut state, b - a)?;
                steps_taken += 1;
                record(&state, b, &mut step_log)?;
                for obs in observers.iter_mut() {
                    obs.observe(b, &state, self);
                }
                snapshots.push((b, state.clone()));
            }
        } else {
            let total_steps = ((config.t_end - config.t_start) / config.dt).round() as u64;
            let snap_steps: Vec<u64> = snapshot_times
                .iter()
                .map(|t| ((t - config.t_start) / config.dt).round() as u64)
                .collect();
            let mut next_snap = 1usize; // index 0 (t_start) already stored
            let half_phase = match source {
                SourceModel::PairPotential(v) => {
                    self.validate_potential(v)?;
                    let samples = self.potential_samples(v);
                    Some(self.half_potential_phases(&samples, config.dt))
                }
                SourceModel::None => {
                    Some(self.half_potential_phases(&vec![0.0; self.grid.len2()], config.dt))
                }
                SourceModel::Tabulated(_) => None,
            };
            for k in 1..=total_steps {
                let t_prev = config.t_start + (k - 1) as f64 * config.dt;
                match source {
                    SourceModel::Tabulated(src) => {
                        self.step_duhamel(&mut state, t_prev, config.dt, src.as_ref())?;
                    }
                    _ => {
                        self.step_strang(&mut state, config.dt, half_phase.as_ref().unwrap())?;
                    }
                }
                steps_taken += 1;
                let t_now = config.t_start + k as f64 * config.dt;
                record(&state, t_now, &mut step_log)?;
                for obs in observers.iter_mut() {
                    obs.observe(t_now, &state, self);
                }
                if next_snap < snap_steps.len() && snap_steps[next_snap] == k {
                    snapshots.push((t_now, state.clone()));
                    next_snap += 1;
                }
            }
        }

        Ok(Trajectory {
            config: config.clone(),
            m: self.m,
            source: source.clone(),
            snapshots,
            step_log,
            steps_taken,
        })
    }
}

/// r(t) at a snapshot time: -i V(x1 - x2) u(t) for the pair model,
/// the sampler value for tabulated sources, zero otherwise.
pub fn source_at(engine: &Propagator2P, traj: &Trajectory, t: f64) -> Result<Field<2>> {
    match &traj.source {
        SourceModel::None => Ok(Field::<2>::zeros(&engine.grid, Space::Position)),
        SourceModel::PairPotential(v) => {
            let u = traj.snapshot_at(t)?;
            let samples = engine.potential_samples(v);
            let mut out = crate::grid::to_space(u, Space::Position);
            out.multiply_real_samples(&samples);
            out.scale_complex(Complex64::new(0.0, -1.0));
            Ok(out)
        }
        SourceModel::Tabulated(src) => Ok(src.sample(t, &engine.grid)),
    }
}

/// Same as [`source_at`] but for an arbitrary state (used when re-stepping).
pub fn source_for_state(
    engine: &Propagator2P,
    source: &SourceModel,
    state: &Field<2>,
    t: f64,
) -> Result<Field<2>> {
    match source {
        SourceModel::None => Ok(Field::<2>::zeros(&engine.grid, Space::Position)),
        SourceModel::PairPotential(v) => {
            let samples = engine.potential_samples(v);
            let mut out = crate::grid::to_space(state, Space::Position);
            out.multiply_real_samples(&samples);
            out.scale_complex(Complex64::new(0.0, -1.0));
            Ok(out)
        }
        SourceModel::Tabulated(src) => Ok(src.sample(t, &engine.grid)),
    }
}

/// Advance a single state by `steps` steps of `dt` from time `t` (used by
/// diagnostics that need values at t +- dt without storing extra snapshots).
pub fn advance(
    engine: &Propagator2P,
    source: &SourceModel,
    state: &Field<2>,
    t: f64,
    dt: f64,
) -> Result<Field<2>> {
    let mut out = crate::grid::to_space(state, Space::Position);
    match source {
        SourceModel::None => engine.step_free(&mut out, dt)?,
        SourceModel::PairPotential(v) => {
            let samples = engine.potential_samples(v);
            let half = engine.half_potential_phases(&samples, dt);
            engine.step_strang(&mut out, dt, &half)?;
        }
        SourceModel::Tabulated(src) => {
            engine.step_duhamel(&mut out, t, dt, src.as_ref())?;
        }
    }
    Ok(out)
}

/// || H~(x~/t) r(t) || for a two-particle cutoff vanishing near the diagonal.
pub fn source_offdiag_norm(
    engine: &Propagator2P,
    traj: &Trajectory,
    ht: &Cutoff2P,
    t: f64,
) -> Result<f64> {
    if ht.diagonal_clearance() <= 0.0 {
        return Err(Error::validation(
            "off-diagonal source norm requires a cutoff with positive diagonal clearance",
        ));
    }
    let mut r = source_at(engine, traj, t)?;
    let samples = ht.samples(&engine.grid, t)?;
    r.multiply_real_samples(&samples);
    Ok(r.l2_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{l2_distance, make_grid};
    use num_complex::Complex64 as C;

    /// Band-limited two-packet state: Gaussian profiles windowed by a bump
    /// in momentum so the Fourier support stays in the central 2/3 of the
    /// lattice (no Nyquist-kink leakage).
    fn smooth_state(grid: &GridSpec) -> Field<2> {
        let bound = (2.0 / 3.0) * grid.p_max();
        let mut f = Field::<2>::from_fn(grid, Space::Momentum, |p| {
            let win = crate::bump::bump(p[0] / bound) * crate::bump::bump(p[1] / bound);
            let prof = (-(p[0] - 0.9).powi(2) - (p[1] + 0.9).powi(2)).exp();
            let phase = -p[0] * (-2.0) - p[1] * 2.0; // centers at -2 and +2
            C::from_polar(win * prof, phase)
        });
        let n = f.l2_norm();
        f.scale(1.0 / n);
        crate::grid::fourier_inverse(&f)
    }

    #[test]
    fn step_free_basics() {
        let g = make_grid(1, 32, 16.0).unwrap();
        let eng = Propagator2P::new(&g, 1.0).unwrap();
        let f = smooth_state(&g);
        let mut a = f.clone();
        eng.step_free(&mut a, 0.0).unwrap();
        assert!(l2_distance(&a, &f).unwrap() < 1e-14);

        let mut b = f.clone();
        eng.step_free(&mut b, 2.0).unwrap();
        assert!((b.l2_norm() - 1.0).abs() < 1e-12);

        // two half steps equal one full step
        let mut c = f.clone();
        eng.step_free(&mut c, 1.0).unwrap();
        eng.step_free(&mut c, 1.0).unwrap();
        assert!(l2_distance(&b, &c).unwrap() < 1e-12);
    }

    #[test]
    fn strang_reduces_to_free_and_conserves_norm() {
        let g = make_grid(1, 32, 16.0).unwrap();
        let eng = Propagator2P::new(&g, 1.0).unwrap();
        let f = smooth_state(&g);

        let zero = eng.half_potential_phases(&vec![0.0; g.len2()], 0.5);
        let mut a = f.clone();
        eng.step_strang(&mut a, 0.5, &zero).unwrap();
        let mut b = f.clone();
        eng.step_free(&mut b, 0.5).unwrap();
        assert!(l2_distance(&a, &b).unwrap() < 1e-13);

        let v = PotentialSpec::Gaussian {
            coupling: 0.3,
            width: 1.0,
        };
        let phases = eng.half_potential_phases(&eng.potential_samples(&v), 0.5);
        let mut c = f.clone();
        for _ in 0..40 {
            eng.step_strang(&mut c, 0.5, &phases).unwrap();
        }
        assert!((c.l2_norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn time_reversal() {
        let g = make_grid(1, 32, 16.0).unwrap();
        let eng = Propagator2P::new(&g, 1.0).unwrap();
        let f = smooth_state(&g);
        let v = PotentialSpec::Gaussian {
            coupling: 0.2,
            width: 1.0,
        };
        let fw = eng.half_potential_phases(&eng.potential_samples(&v), 0.25);
        let bw = eng.half_potential_phases(&eng.potential_samples(&v), -0.25);
        let mut s = f.clone();
        for _ in 0..20 {
            eng.step_strang(&mut s, 0.25, &fw).unwrap();
        }
        for _ in 0..20 {
            eng.step_strang(&mut s, -0.25, &bw).unwrap();
        }
        assert!(l2_distance(&s, &f).unwrap() < 1e-10);
    }

    #[test]
    fn strang_second_order_richardson() {
        // self-convergence: error vs dt/2 reference halves by ~4
        let g = make_grid(1, 64, 16.0).unwrap();
        let eng = Propagator2P::new(&g, 1.0).unwrap();
        let f = smooth_state(&g);
        let v = PotentialSpec::Gaussian {
            coupling: 0.5,
            width: 1.5,
        };
        let horizon: f64 = 2.0;
        let run = |dt: f64| -> Field<2> {
            let phases = eng.half_potential_phases(&eng.potential_samples(&v), dt);
            let mut s = f.clone();
            let steps = (horizon / dt).round() as usize;
            for _ in 0..steps {
                eng.step_strang(&mut s, dt, &phases).unwrap();
            }
            s
        };
        // consecutive-difference self-convergence: ||u_dt - u_dt/2|| over
        // ||u_dt/2 - u_dt/4|| tends to 4 for a second-order scheme
        let coarse = run(0.2);
        let mid = run(0.1);
        let fine = run(0.05);
        let e1 = l2_distance(&coarse, &mid).unwrap();
        let e2 = l2_distance(&mid, &fine).unwrap();
        let ratio = e1 / e2;
        assert!(
            (3.5..4.5).contains(&ratio),
            "Richardson ratio {ratio} (e1={e1:.3e}, e2={e2:.3e})"
        );
    }

    #[test]
    fn duhamel_zero_source_equals_free() {
        let g = make_grid(1, 32, 16.0).unwrap();
        let eng = Propagator2P::new(&g, 1.0).unwrap();
        let f = smooth_state(&g);
        let zero = |_t: f64, grid: &GridSpec| Field::<2>::zeros(grid, Space::Position);
        let mut a = f.clone();
        eng.step_duhamel(&mut a, 1.0, 0.5, &zero).unwrap();
        let mut b = f.clone();
        eng.step_free(&mut b, 0.5).unwrap();
        assert!(l2_distance(&a, &b).unwrap() < 1e-13);
    }

    #[test]
    fn duhamel_constant_source_closed_form() {
        // For constant r and diagonal H = omega~, the exact solution per
        // momentum mode is u(t) = e^{-i om t} u0 + (1 - e^{-i om t})/(i om) r.
        let g = make_grid(1, 32, 16.0).unwrap();
        let eng = Propagator2P::new(&g, 2.0).unwrap();
        let u0 = smooth_state(&g);
        let r0 = {
            let mut r = smooth_state(&g);
            r.scale(0.3);
            r
        };
        let rsrc = r0.clone();
        let src = move |_t: f64, _grid: &GridSpec| rsrc.clone();

        let horizon: f64 = 1.0;
        let dt = 0.00125;
        let mut s = u0.clone();
        let mut t = 0.0;
        for _ in 0..((horizon / dt).round() as usize) {
            eng.step_duhamel(&mut s, t, dt, &src).unwrap();
            t += dt;
        }

        // closed form in momentum space
        let u0h = crate::grid::fourier_forward(&u0);
        let r0h = crate::grid::fourier_forward(&r0);
        let mut exact = Field::<2>::zeros(&g, Space::Momentum);
        for (i, e) in exact.values.iter_mut().enumerate() {
            let om = eng.omega_tilde.samples[i].re;
            let ph = C::from_polar(1.0, -om * horizon);
            *e = ph * u0h.values[i]
                + (C::new(1.0, 0.0) - ph) / C::new(0.0, om) * r0h.values[i];
        }
        let exact_pos = crate::grid::fourier_inverse(&exact);
        let err = l2_distance(&s, &exact_pos).unwrap();
        assert!(err < 1e-6, "Duhamel vs closed form error {err}");
    }

    #[test]
    fn duhamel_corotating_source_linear_growth() {
        // r(t) = e^{-i omega~ t} r0 gives u(t) = e^{-i omega~ t}(u0 + t r0).
        let g = make_grid(1, 32, 16.0).unwrap();
        let eng = Propagator2P::new(&g, 1.0).unwrap();
        let u0 = smooth_state(&g);
        let r0 = {
            let mut r = smooth_state(&g);
            r.scale_complex(C::new(0.0, 0.45));
            r
        };
        let eng2 = Propagator2P::new(&g, 1.0).unwrap();
        let r0c = r0.clone();
        let src = move |t: f64, _grid: &GridSpec| {
            let mut r = r0c.clone();
            eng2.step_free(&mut r, t).unwrap();
            r
        };
        let horizon: f64 = 2.0;
        let dt = 0.0025;
        let mut s = u0.clone();
        let mut t = 0.0;
        for _ in 0..((horizon / dt).round() as usize) {
            eng.step_duhamel(&mut s, t, dt, &src).unwrap();
            t += dt;
        }
        let mut exact = u0.clone();
        exact.axpy(C::new(horizon, 0.0), &r0).unwrap();
        eng.step_free(&mut exact, horizon).unwrap();
        let err = l2_distance(&s, &exact).unwrap();
        assert!(err < 1e-6, "co-rotating linear growth error {err}");
    }

    #[test]
    fn duhamel_richardson_ratio() {
        let g = make_grid(1, 32, 16.0).unwrap();
        let eng = Propagator2P::new(&g, 1.0).unwrap();
        let u0 = smooth_state(&g);
        // a smooth t-dependent source with nontrivial commutator structure
        let base = smooth_state(&g);
        let src = move |t: f64, _grid: &GridSpec| {
            let mut r = base.clone();
            r.scale((0.7 * t).sin() + 1.2);
            r
        };
        let run = |dt: f64| {
            let mut s = u0.clone();
            let mut t = 0.0;
            for _ in 0..((2.0 / dt).round() as usize) {
                eng.step_duhamel(&mut s, t, dt, &src).unwrap();
                t += dt;
            }
            s
        };
        let coarse = run(0.2);
        let mid = run(0.1);
        let fine = run(0.05);
        let ratio =
            l2_distance(&coarse, &mid).unwrap() / l2_distance(&mid, &fine).unwrap();
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn run_free_conserves_and_is_reproducible() {
        let g = make_grid(1, 32, 16.0).unwrap();
        let eng = Propagator2P::new(&g, 1.0).unwrap();
        let f = smooth_state(&g);
        let cfg = EvolutionConfig {
            t_start: 1.0,
            t_end: 8.0,
            dt: 0.5,
            scheme: Scheme::Strang,
            schedule: SnapshotSchedule {
                log_count: 5,
                linear: vec![2.0],
                dyadic: true,
            },
            wraparound_tolerance: 1e-4,
            exact_free_jumps: true,
        };
        let t1 = eng.run(&f, &SourceModel::None, &cfg, &mut []).unwrap();
        let t2 = eng.run(&f, &SourceModel::None, &cfg, &mut []).unwrap();
        assert_eq!(t1.snapshots.len(), t2.snapshots.len());
        for ((ta, fa), (tb, fb)) in t1.snapshots.iter().zip(&t2.snapshots) {
            assert_eq!(ta, tb);
            assert_eq!(fa.values, fb.values); // bit identical
        }
        let n0 = t1.snapshots[0].1.l2_norm();
        let nf = t1.snapshots.last().unwrap().1.l2_norm();
        assert!((n0 - nf).abs() < 1e-12);
        // snapshots strictly increasing in time
        assert!(t1
            .snapshots
            .windows(2)
            .all(|w| w[1].0 > w[0].0));
    }

    #[test]
    fn run_aborts_on_wraparound() {
        let g = make_grid(1, 32, 8.0).unwrap();
        let eng = Propagator2P::new(&g, 1.0).unwrap();
        // fast packet near the edge
        let f = Field::<2>::from_fn(&g, Space::Position, |x| {
            C::new((-(x[0] - 5.0).powi(2) - x[1] * x[1]).exp(), 0.0)
                * C::from_polar(1.0, 2.0 * x[0])
        });
        let cfg = EvolutionConfig {
            t_start: 1.0,
            t_end: 40.0,
            dt: 0.5,
            wraparound_tolerance: 1e-8,
            ..Default::default()
        };
        let err = eng
            .run(&f, &SourceModel::None, &cfg, &mut [])
            .unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn source_offdiag_norm_bounded_by_potential_tail() {
        let g = make_grid(1, 64, 32.0).unwrap();
        let eng = Propagator2P::new(&g, 1.0).unwrap();
        let f = smooth_state(&g);
        let lambda = 0.7;
        let v = PotentialSpec::Gaussian {
            coupling: lambda,
            width: 0.5,
        };
        let cfg = EvolutionConfig {
            t_start: 1.0,
            t_end: 10.0,
            dt: 0.25,
            schedule: SnapshotSchedule {
                log_count: 4,
                linear: vec![10.0],
                dyadic: false,
            },
            wraparound_tolerance: 1e-3,
            ..Default::default()
        };
        let traj = eng
            .run(&f, &SourceModel::PairPotential(v.clone()), &cfg, &mut [])
            .unwrap();
        // H~ supported at |x1 - x2|/t >= 0.4
        let ht = Cutoff2P::diagonal_clearing(0.0, 5.0, 0.4, 0.1, 0.5).unwrap();
        let t = 10.0;
        let val = source_offdiag_norm(&eng, &traj, &ht, t).unwrap();
        let u = traj.snapshot_at(t).unwrap();
        // pointwise potential bound, split into the plain region (raw
        // separation equals the minimal image) and the torus wrap region
        // (raw separation beyond L, where the periodic image of V re-enters)
        let n = g.n;
        let wrap_mass: f64 = u
            .values
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                let (j1, j2) = (i / n, i % n);
                (g.x_at(j1) - g.x_at(j2)).abs() >= g.box_half_length
            })
            .map(|(_, v)| v.norm_sqr() * u.weight())
            .sum();
        let bound =
            u.l2_norm() * v.max_beyond(0.4 * t, &g) + wrap_mass.sqrt() * v.peak(&g) + 1e-12;
        assert!(val <= bound, "value {val} vs lattice-aware bound {bound}");
        // the coarse closed-form bound quoted for these parameters
        assert!(val <= 0.7 * (-8.0f64).exp() * u.l2_norm());
        // V == 0 and H~ == 0 give 0
        let traj0 = eng.run(&f, &SourceModel::None, &cfg, &mut []).unwrap();
        assert_eq!(source_offdiag_norm(&eng, &traj0, &ht, t).unwrap(), 0.0);
    }

    #[test]
    fn snapshot_times_contain_required_points() {
        let cfg = EvolutionConfig {
            t_start: 1.0,
            t_end: 100.0,
            dt: 0.5,
            schedule: SnapshotSchedule {
                log_count: 10,
                linear: vec![50.0],
                dyadic: true,
            },
            ..Default::default()
        };
        let ts = cfg.snapshot_times();
        assert_eq!(ts[0], 1.0);
        assert_eq!(*ts.last().unwrap(), 100.0);
        assert!(ts.contains(&50.0));
        for dy in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
            assert!(
                ts.iter().any(|t| (t - dy).abs() < 0.25),
                "missing dyadic {dy}"
            );
        }
    }
}
