//! Time series of nonnegative diagnostics with running dt/t integrals.

use serde::Serialize;

/// Sampled integrand over a (usually log-spaced) time grid together with the
/// running integral against dt/t (trapezoid in ln t).
#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticSeries {
    pub times: Vec<f64>,
    pub integrand: Vec<f64>,
    pub running_integral: Vec<f64>,
}

impl DiagnosticSeries {
    pub fn from_samples(times: Vec<f64>, integrand: Vec<f64>) -> Self {
        assert_eq!(times.len(), integrand.len());
        assert!(times.windows(2).all(|w| w[1] > w[0]), "times must increase");
        let mut running = Vec::with_capacity(times.len());
        let mut acc = 0.0;
        for i in 0..times.len() {
            if i > 0 {
                let dlog = (times[i] / times[i - 1]).ln();
                acc += 0.5 * (integrand[i] + integrand[i - 1]) * dlog;
            }
            running.push(acc);
        }
        DiagnosticSeries {
            times,
            integrand,
            running_integral: running,
        }
    }

    pub fn total(&self) -> f64 {
        *self.running_integral.last().unwrap_or(&0.0)
    }

    /// Fraction of the integral accumulated over the last `decades` decades
    /// of the time range, e.g. over [T/10, T] for `decades = 1`.
    pub fn tail_fraction(&self, decades: f64) -> f64 {
        let total = self.total();
        if total <= 0.0 {
            return 0.0;
        }
        let t_end = *self.times.last().unwrap();
        let t_cut = t_end / 10f64.powf(decades);
        let at_cut = self
            .times
            .iter()
            .zip(&self.running_integral)
            .take_while(|(t, _)| **t < t_cut)
            .last()
            .map(|(_, r)| *r)
            .unwrap_or(0.0);
        (total - at_cut) / total
    }

    /// Least-squares slope of ln(integrand) against ln(t) over [t_lo, t_hi].
    /// Values below `floor` are clamped; returns None when fewer than three
    /// samples fall in the window.
    pub fn fitted_loglog_slope(&self, t_lo: f64, t_hi: f64, floor: f64) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .times
            .iter()
            .zip(&self.integrand)
            .filter(|(t, _)| **t >= t_lo && **t <= t_hi)
            .map(|(t, v)| (t.ln(), v.max(floor).ln()))
            .collect();
        fit_slope(&pts)
    }

    /// Slope over the final decade [T/10, T].
    pub fn last_decade_slope(&self, floor: f64) -> Option<f64> {
        let t_end = *self.times.last()?;
        self.fitted_loglog_slope(t_end / 10.0, t_end, floor)
    }

    /// True when the series decreases in trend, allowing `fluct` relative
    /// local fluctuation (each sample may exceed the running minimum so far
    /// by at most a factor 1 + fluct).
    pub fn nonincreasing_trend(&self, fluct: f64) -> bool {
        let mut run_min = f64::INFINITY;
        for &v in &self.integrand {
            if v > run_min * (1.0 + fluct) {
                return false;
            }
            run_min = run_min.min(v);
        }
        true
    }
}

pub fn fit_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return None;
    }
    Some((n * sxy - sx * sy) / denom)
}

/// Log-spaced sample times over [t0, t1] (inclusive endpoints).
pub fn log_times(t0: f64, t1: f64, count: usize) -> Vec<f64> {
    assert!(t1 > t0 && t0 > 0.0 && count >= 2);
    let l0 = t0.ln();
    let l1 = t1.ln();
    (0..count)
        .map(|i| (l0 + (l1 - l0) * i as f64 / (count - 1) as f64).exp())
        .collect()
}
