//! Positive-energy Klein-Gordon wave packets with compactly supported
//! Fourier data, their velocity supports, and convergence diagnostics for
//! the scaled position vs. group-velocity localization.

use num_complex::Complex64;

use crate::bump::bump;
use crate::detectors::Cutoff;
use crate::error::{Error, Result};
use crate::grid::{fourier_inverse, l2_distance, Field, GridSpec, Space};
use crate::series::DiagnosticSeries;
use crate::specops::{
    apply_multiplier, grad_omega_multiplier, omega, omega_multiplier, position_cutoff_samples,
    velocity_cutoff, FreePropagator,
};

/// One-particle wave packet defined by momentum-space data
/// f_hat(p) = envelope((p - p_center)/p_width) * exp(-i p.x0), normalized.
#[derive(Debug, Clone)]
pub struct KgWavePacket {
    pub fourier_data: Field<1>,
    pub m: f64,
    pub center_x0: Vec<f64>,
    /// Declared support box of f_hat: [p_center - p_width, p_center + p_width]
    /// per axis.
    pub support_lo: Vec<f64>,
    pub support_hi: Vec<f64>,
    /// Radius containing all but `tail_tol` of the initial spatial mass,
    /// measured at construction; used by the wraparound guard.
    pub spatial_radius: f64,
    pub tail_tol: f64,
}

/// Image of the Fourier support box under the group-velocity map.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocitySupport {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl VelocitySupport {
    pub fn max_speed(&self) -> f64 {
        self.lo
            .iter()
            .chain(self.hi.iter())
            .map(|v| v.abs())
            .fold(0.0, f64::max)
    }
}

/// Envelope choices for packet construction. The default smooth bump is
/// exp(1 - 1/(1 - s^2)).
#[derive(Debug, Clone, Copy, Default)]
pub enum Envelope {
    #[default]
    Bump,
}

impl Envelope {
    fn eval(&self, s: f64) -> f64 {
        match self {
            Envelope::Bump => bump(s),
        }
    }
}

/// Build a normalized packet. The declared Fourier support box must lie in
/// the central 2/3 of the momentum lattice (anti-aliasing policy).
pub fn make_packet(
    grid: &GridSpec,
    m: f64,
    p_center: &[f64],
    p_width: f64,
    x0: &[f64],
    envelope: Envelope,
) -> Result<KgWavePacket> {
    if m <= 0.0 {
        return Err(Error::validation("mass must be positive"));
    }
    if p_center.len() != grid.d || x0.len() != grid.d {
        return Err(Error::validation("p_center / x0 dimension mismatch"));
    }
    if p_width <= 0.0 {
        return Err(Error::validation("p_width must be positive"));
    }
    let p_bound = (2.0 / 3.0) * grid.p_max();
    for a in 0..grid.d {
        let edge = p_center[a].abs() + p_width;
        if edge > p_bound {
            return Err(Error::validation(format!(
                "packet support reaches |p| = {edge:.4}, outside the central 2/3 \
                 of the momentum lattice (|p| <= {p_bound:.4}); enlarge n or shrink the box"
            )));
        }
    }

    let pc = p_center.to_vec();
    let x0v = x0.to_vec();
    let mut fh = Field::<1>::from_fn(grid, Space::Momentum, |p| {
        let s2: f64 = p
            .iter()
            .zip(&pc)
            .map(|(pi, ci)| (pi - ci) * (pi - ci))
            .sum();
        let env = envelope.eval(s2.sqrt() / p_width);
        let phase: f64 = p.iter().zip(&x0v).map(|(pi, xi)| pi * xi).sum();
        Complex64::from_polar(env, -phase)
    });
    let n0 = fh.l2_norm();
    if n0 == 0.0 {
        return Err(Error::validation("packet envelope vanished on the lattice"));
    }
    fh.scale(1.0 / n0);

    // measured spatial radius containing all but tail_tol of the mass
    let tail_tol = 1e-10;
    let spatial_radius = measured_radius(&fh, x0, tail_tol);

    Ok(KgWavePacket {
        fourier_data: fh,
        m,
        center_x0: x0.to_vec(),
        support_lo: p_center.iter().map(|c| c - p_width).collect(),
        support_hi: p_center.iter().map(|c| c + p_width).collect(),
        spatial_radius,
        tail_tol,
    })
}

/// Radius around x0 containing all but `tol` of the packet's position mass.
fn measured_radius(fh: &Field<1>, x0: &[f64], tol: f64) -> f64 {
    let f = fourier_inverse(fh);
    let grid = &f.grid;
    let d = grid.d;
    let mut idx = vec![0usize; d];
    // collect (distance, mass) pairs and find the tol-quantile radius
    let mut pairs: Vec<(f64, f64)> = f
        .values
        .iter()
        .enumerate()
        .map(|(flat, v)| {
            crate::grid::unravel(flat, grid.n, &mut idx);
            let mut r2 = 0.0;
            for a in 0..d {
                let dx = grid.x_at(idx[a]) - x0[a];
                r2 += dx * dx;
            }
            (r2.sqrt(), v.norm_sqr())
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let mut acc = 0.0;
    for (r, m) in &pairs {
        acc += m;
        if acc >= total * (1.0 - tol) {
            return *r;
        }
    }
    pairs.last().map(|p| p.0).unwrap_or(0.0)
}

impl KgWavePacket {
    /// Group-velocity image of the declared support box. Monotonicity of
    /// grad omega per axis makes the box endpoints exact in d = 1; in d = 2
    /// the support-box boundary is sampled densely (256 points).
    pub fn velocity_support(&self) -> VelocitySupport {
        let d = self.fourier_data.grid.d;
        let m = self.m;
        if d == 1 {
            let v_at = |p: f64| p / omega(&[p], m);
            let (a, b) = (v_at(self.support_lo[0]), v_at(self.support_hi[0]));
            VelocitySupport {
                lo: vec![a.min(b)],
                hi: vec![a.max(b)],
            }
        } else {
            let mut lo = vec![f64::INFINITY; d];
            let mut hi = vec![f64::NEG_INFINITY; d];
            let nb = 256usize;
            for i in 0..nb {
                let s = i as f64 / nb as f64;
                // walk the rectangle boundary
                let (px, py) = rect_boundary_point(
                    self.support_lo[0],
                    self.support_hi[0],
                    self.support_lo[1],
                    self.support_hi[1],
                    s,
                );
                let om = omega(&[px, py], m);
                let v = [px / om, py / om];
                for a in 0..2 {
                    lo[a] = lo[a].min(v[a]);
                    hi[a] = hi[a].max(v[a]);
                }
            }
            // interior extremum of a component can only occur at p = 0 along
            // the other axis; include the box center projections
            for a in 0..d {
                let mut p = vec![0.0; d];
                p[a] = self.support_lo[a];
                let om = omega(&p, m);
                lo[a] = lo[a].min(p[a] / om);
                p[a] = self.support_hi[a];
                let om = omega(&p, m);
                hi[a] = hi[a].max(p[a] / om);
            }
            VelocitySupport { lo, hi }
        }
    }

    pub fn max_group_speed(&self) -> f64 {
        self.velocity_support().max_speed()
    }

    /// Check the wraparound guard at time t, or explain the required box.
    pub fn guard(&self, t: f64) -> Result<()> {
        let grid = &self.fourier_data.grid;
        let l = grid.box_half_length;
        let x0max = self
            .center_x0
            .iter()
            .map(|c| c.abs())
            .fold(0.0, f64::max);
        let margin = 0.05 * l;
        let reach = x0max + t.abs() * self.max_group_speed() + self.spatial_radius;
        if reach < l - margin {
            Ok(())
        } else {
            Err(Error::guard(format!(
                "wraparound guard at t = {t}: |x0| + t*v_max + packet radius = {reach:.1} \
                 exceeds L - 5% = {:.1}; required box half-length L >= {:.1}",
                l - margin,
                reach / 0.95
            )))
        }
    }

    /// g_t = e^{-i t omega(D)} f in position representation.
    pub fn evolve(&self, t: f64) -> Result<Field<1>> {
        self.guard(t)?;
        let om = omega_multiplier(&self.fourier_data.grid, self.m)?;
        let prop = FreePropagator::new(&om, t)?;
        let mut fh = self.fourier_data.clone();
        prop.apply_in_place(&mut fh)?;
        Ok(fourier_inverse(&fh))
    }
}

fn rect_boundary_point(x0: f64, x1: f64, y0: f64, y1: f64, s: f64) -> (f64, f64) {
    let t = 4.0 * s;
    if t < 1.0 {
        (x0 + (x1 - x0) * t, y0)
    } else if t < 2.0 {
        (x1, y0 + (y1 - y0) * (t - 1.0))
    } else if t < 3.0 {
        (x1 - (x1 - x0) * (t - 2.0), y1)
    } else {
        (x0, y1 - (y1 - y0) * (t - 3.0))
    }
}

/// Residual series || e^{it omega} h(x/t) e^{-it omega} f  -  h(grad omega(D)) f ||
/// over the requested times. The Fourier-side cutoff is the exact t -> infinity
/// limit, so the series should decay to zero in trend.
pub fn check_position_velocity_localization(
    packet: &KgWavePacket,
    h: &Cutoff,
    t_list: &[f64],
) -> Result<DiagnosticSeries> {
    let grid = packet.fourier_data.grid.clone();
    let om = omega_multiplier(&grid, packet.m)?;
    let target = apply_multiplier(
        &velocity_cutoff(&grid, h, packet.m)?,
        &packet.fourier_data,
    )?;
    let mut vals = Vec::with_capacity(t_list.len());
    for &t in t_list {
        packet.guard(t)?;
        let gt = packet.evolve(t)?;
        let samples = position_cutoff_samples::<1>(&grid, h, t, 0)?;
        let mut cut = gt;
        cut.multiply_real_samples(&samples);
        let mut back = crate::grid::fourier_forward(&cut);
        FreePropagator::new(&om, -t)?.apply_in_place(&mut back)?;
        vals.push(l2_distance(&back, &target)?);
    }
    Ok(DiagnosticSeries::from_samples(t_list.to_vec(), vals))
}

/// Series || chi1(x/t) e^{-it omega} chi2(grad omega(D)) f || for cutoffs with
/// disjoint supports; the fitted log-log slope over the last decade is the
/// finite proxy for superpolynomial decay.
pub struct DisjointSupportDecay {
    pub series: DiagnosticSeries,
    pub last_decade_slope: Option<f64>,
}

pub fn check_disjoint_support_decay(
    packet: &KgWavePacket,
    chi1: &Cutoff,
    chi2: &Cutoff,
    t_list: &[f64],
) -> Result<DisjointSupportDecay> {
    if chi1.support_distance(chi2) <= 0.0 {
        return Err(Error::validation(
            "chi1 and chi2 must have disjoint supports with positive distance",
        ));
    }
    let grid = packet.fourier_data.grid.clone();
    let om = omega_multiplier(&grid, packet.m)?;
    let filtered = apply_multiplier(
        &velocity_cutoff(&grid, chi2, packet.m)?,
        &packet.fourier_data,
    )?;
    let mut vals = Vec::with_capacity(t_list.len());
    for &t in t_list {
        packet.guard(t)?;
        let mut gt = filtered.clone();
        FreePropagator::new(&om, t)?.apply_in_place(&mut gt)?;
        let mut pos = fourier_inverse(&gt);
        let samples = position_cutoff_samples::<1>(&grid, chi1, t, 0)?;
        pos.multiply_real_samples(&samples);
        vals.push(pos.l2_norm());
    }
    let series = DiagnosticSeries::from_samples(t_list.to_vec(), vals);
    let slope = series.last_decade_slope(1e-300);
    Ok(DisjointSupportDecay {
        series,
        last_decade_slope: slope,
    })
}
