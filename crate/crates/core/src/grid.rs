//! Periodic-box discretization of one- and two-particle configuration space
//! with continuum-normalized unitary Fourier transforms.
//!
//! Conventions: box [-L, L) per axis with n points, spacing dx = 2L/n,
//! momentum lattice p_k = pi*k/L for k in {-n/2, ..., n/2 - 1} (stored in FFT
//! bin order), and the unitary transform
//!     f_hat(p) = (2*pi)^{-dim/2} * integral e^{-i p.x} f(x) dx
//! discretized with weights dx^dim (position) and dp^dim (momentum), so that
//! Parseval holds exactly between the two weighted norms.

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Discretization of one axis of configuration space, shared by every field.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    /// One-particle spatial dimension (1 or 2).
    pub d: usize,
    /// Points per axis, a power of two >= 16.
    pub n: usize,
    /// Box half-length; positions run over [-L, L).
    pub box_half_length: f64,
}

impl GridSpec {
    pub fn new(d: usize, n: usize, box_half_length: f64) -> Result<Self> {
        if d != 1 && d != 2 {
            return Err(Error::validation(format!("d must be 1 or 2, got {d}")));
        }
        if !n.is_power_of_two() || n < 16 {
            return Err(Error::validation(format!(
                "n must be a power of two >= 16, got {n}"
            )));
        }
        if !(box_half_length > 0.0) || !box_half_length.is_finite() {
            return Err(Error::validation(format!(
                "box half-length must be positive, got {box_half_length}"
            )));
        }
        Ok(GridSpec {
            d,
            n,
            box_half_length,
        })
    }

    /// Grid spacing dx = 2L/n.
    pub fn dx(&self) -> f64 {
        2.0 * self.box_half_length / self.n as f64
    }

    /// Momentum lattice spacing dp = pi/L.
    pub fn dp(&self) -> f64 {
        std::f64::consts::PI / self.box_half_length
    }

    /// Largest lattice momentum magnitude (Nyquist), pi/dx.
    pub fn p_max(&self) -> f64 {
        std::f64::consts::PI / self.dx()
    }

    /// Position of index j along one axis: -L + j*dx.
    pub fn x_at(&self, j: usize) -> f64 {
        -self.box_half_length + j as f64 * self.dx()
    }

    /// Momentum of FFT bin k along one axis: pi*wrap(k)/L with
    /// wrap(k) = k for k < n/2 and k - n otherwise.
    pub fn p_at(&self, k: usize) -> f64 {
        let half = self.n / 2;
        let signed = if k < half {
            k as isize
        } else {
            k as isize - self.n as isize
        };
        signed as f64 * self.dp()
    }

    /// Number of points of a one-particle field, n^d.
    pub fn len1(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    /// Number of points of a two-particle field, n^(2d).
    pub fn len2(&self) -> usize {
        self.n.pow(2 * self.d as u32)
    }
}

/// Construct a grid; prefer this free function to mirror the other modules.
pub fn make_grid(d: usize, n: usize, box_half_length: f64) -> Result<GridSpec> {
    GridSpec::new(d, n, box_half_length)
}

/// Which representation a field's values currently live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Position,
    Momentum,
}

/// Complex amplitude over P-particle configuration space (P*d axes, each of
/// n points, row-major with the last axis fastest).
#[derive(Debug, Clone)]
pub struct Field<const P: usize> {
    pub grid: GridSpec,
    pub space: Space,
    pub values: Vec<Complex64>,
}

/// One-particle amplitude (f, g_t).
pub type ComplexField = Field<1>;
/// Two-particle amplitude over (x1, x2) (F_t, u(t)).
pub type ComplexField2P = Field<2>;

impl<const P: usize> Field<P> {
    pub fn axes(grid: &GridSpec) -> usize {
        P * grid.d
    }

    pub fn expected_len(grid: &GridSpec) -> usize {
        grid.n.pow((P * grid.d) as u32)
    }

    pub fn zeros(grid: &GridSpec, space: Space) -> Self {
        Field {
            grid: grid.clone(),
            space,
            values: vec![Complex64::new(0.0, 0.0); Self::expected_len(grid)],
        }
    }

    pub fn from_values(grid: &GridSpec, space: Space, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != Self::expected_len(grid) {
            return Err(Error::validation(format!(
                "field length {} does not match grid ({} expected)",
                values.len(),
                Self::expected_len(grid)
            )));
        }
        Ok(Field {
            grid: grid.clone(),
            space,
            values,
        })
    }

    /// Fill from a function of the coordinate tuple (position or momentum
    /// depending on `space`).
    pub fn from_fn(grid: &GridSpec, space: Space, f: impl Fn(&[f64]) -> Complex64) -> Self {
        let axes = Self::axes(grid);
        let mut values = vec![Complex64::new(0.0, 0.0); Self::expected_len(grid)];
        let mut coord = vec![0.0; axes];
        let mut idx = vec![0usize; axes];
        for (flat, v) in values.iter_mut().enumerate() {
            unravel(flat, grid.n, &mut idx);
            for a in 0..axes {
                coord[a] = match space {
                    Space::Position => grid.x_at(idx[a]),
                    Space::Momentum => grid.p_at(idx[a]),
                };
            }
            *v = f(&coord);
        }
        Field {
            grid: grid.clone(),
            space,
            values,
        }
    }

    /// Integration weight per lattice point for the current representation.
    pub fn weight(&self) -> f64 {
        let axes = Self::axes(&self.grid) as i32;
        match self.space {
            Space::Position => self.grid.dx().powi(axes),
            Space::Momentum => self.grid.dp().powi(axes),
        }
    }

    /// Continuum-normalized L2 norm.
    pub fn l2_norm(&self) -> f64 {
        let w = self.weight();
        let s: f64 = self.values.iter().map(|v| v.norm_sqr()).sum();
        (s * w).sqrt()
    }

    pub fn norm_sqr(&self) -> f64 {
        let w = self.weight();
        let s: f64 = self.values.iter().map(|v| v.norm_sqr()).sum();
        s * w
    }

    pub fn scale(&mut self, a: f64) {
        for v in &mut self.values {
            *v *= a;
        }
    }

    pub fn scale_complex(&mut self, a: Complex64) {
        for v in &mut self.values {
            *v *= a;
        }
    }

    /// self <- self + a * other (requires matching grid and space).
    pub fn axpy(&mut self, a: Complex64, other: &Field<P>) -> Result<()> {
        check_match(self, other)?;
        for (v, o) in self.values.iter_mut().zip(&other.values) {
            *v += a * o;
        }
        Ok(())
    }

    /// Pointwise multiplication by real samples of a function of the
    /// current-representation coordinates.
    pub fn multiply_real_samples(&mut self, samples: &[f64]) {
        debug_assert_eq!(samples.len(), self.values.len());
        for (v, s) in self.values.iter_mut().zip(samples) {
            *v *= *s;
        }
    }

    /// Fraction of norm^2 within `edge_frac` of the box edge along any axis.
    /// Only meaningful in position space.
    pub fn boundary_mass_fraction(&self, edge_frac: f64) -> f64 {
        assert_eq!(self.space, Space::Position);
        let axes = Self::axes(&self.grid);
        let cut = (1.0 - edge_frac) * self.grid.box_half_length;
        let n = self.grid.n;
        let mut idx = vec![0usize; axes];
        let mut edge = 0.0;
        let mut total = 0.0;
        for (flat, v) in self.values.iter().enumerate() {
            unravel(flat, n, &mut idx);
            let ns = v.norm_sqr();
            total += ns;
            if idx
                .iter()
                .any(|&j| self.grid.x_at(j).abs() >= cut)
            {
                edge += ns;
            }
        }
        if total == 0.0 {
            0.0
        } else {
            edge / total
        }
    }
}

fn check_match<const P: usize>(a: &Field<P>, b: &Field<P>) -> Result<()> {
    if a.grid != b.grid {
        return Err(Error::validation("grid mismatch between fields"));
    }
    if a.space != b.space {
        return Err(Error::validation("representation mismatch between fields"));
    }
    Ok(())
}

/// Decompose a flat row-major index into per-axis indices (all axes length n).
pub fn unravel(mut flat: usize, n: usize, out: &mut [usize]) {
    for a in (0..out.len()).rev() {
        out[a] = flat % n;
        flat /= n;
    }
}

/// Inner product <a, b>, conjugate-linear in the first slot, with the
/// continuum weight of the common representation.
pub fn inner_product<const P: usize>(a: &Field<P>, b: &Field<P>) -> Result<Complex64> {
    check_match(a, b)?;
    let w = a.weight();
    let mut acc = Complex64::new(0.0, 0.0);
    for (x, y) in a.values.iter().zip(&b.values) {
        acc += x.conj() * y;
    }
    Ok(acc * w)
}

/// L2 distance between two fields in the same representation.
pub fn l2_distance<const P: usize>(a: &Field<P>, b: &Field<P>) -> Result<f64> {
    check_match(a, b)?;
    let w = a.weight();
    let s: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y).norm_sqr())
        .sum();
    Ok((s * w).sqrt())
}

/// Cached FFT plans plus the phase/scale tables for the box conventions.
pub struct Transformer {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Transformer {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Transformer {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    /// In-place DFT along `axis` of a hypercubic array with `axes` axes of
    /// length n. Lines are gathered into contiguous scratch, transformed,
    /// and scattered back; parallel over lines with disjoint writes so the
    /// result is bit-deterministic.
    fn fft_axis(&self, values: &mut [Complex64], axes: usize, axis: usize, forward: bool) {
        let n = self.n;
        let total = values.len();
        debug_assert_eq!(total, n.pow(axes as u32));
        let stride = n.pow((axes - 1 - axis) as u32);
        let block = stride * n;
        let nlines = total / n;
        let plan = if forward {
            self.forward.clone()
        } else {
            self.inverse.clone()
        };

        if stride == 1 {
            // Last axis: contiguous lines.
            values.par_chunks_mut(n).for_each(|line| {
                plan.process(line);
            });
            return;
        }

        // Strided axis: work per (outer, inner) line. Lines touch disjoint
        // index sets, so the unordered parallel writes are race-free and the
        // result does not depend on scheduling.
        let values_ptr = SendPtr(values.as_mut_ptr());
        (0..nlines).into_par_iter().for_each(|line| {
            let p = values_ptr.get();
            let outer = line / stride;
            let inner = line % stride;
            let base = outer * block + inner;
            let mut buf = vec![Complex64::new(0.0, 0.0); n];
            unsafe {
                for j in 0..n {
                    buf[j] = *p.add(base + j * stride);
                }
                plan.process(&mut buf);
                for j in 0..n {
                    *p.add(base + j * stride) = buf[j];
                }
            }
        });
    }
}

#[derive(Clone, Copy)]
struct SendPtr(*mut Complex64);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}
impl SendPtr {
    fn get(&self) -> *mut Complex64 {
        self.0
    }
}

/// Process-wide plan cache keyed by transform length.
pub fn transformer(n: usize) -> Arc<Transformer> {
    use std::collections::HashMap;
    use std::sync::{Mutex, OnceLock};
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Transformer>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().unwrap();
    map.entry(n).or_insert_with(|| Arc::new(Transformer::new(n))).clone()
}

/// Apply a diagonal momentum-space factor to a position-space field in place:
/// values <- IDFT( table .* DFT(values) ) with the 1/n^axes normalization
/// folded into `table` by the caller being unnecessary -- it is applied here.
///
/// The box sign/offset factors cancel between the two transforms, so `table`
/// is sampled on the FFT-ordered momentum lattice with no extra phases.
pub fn apply_momentum_table<const P: usize>(field: &mut Field<P>, table: &[Complex64]) {
    assert_eq!(field.space, Space::Position);
    let grid = &field.grid;
    let axes = Field::<P>::axes(grid);
    let n = grid.n;
    debug_assert_eq!(table.len(), field.values.len());
    let tr = transformer(n);
    for axis in 0..axes {
        tr.fft_axis(&mut field.values, axes, axis, true);
    }
    let norm = 1.0 / (n as f64).powi(axes as i32);
    for (v, t) in field.values.iter_mut().zip(table) {
        *v *= t * norm;
    }
    for axis in 0..axes {
        tr.fft_axis(&mut field.values, axes, axis, false);
    }
}

/// Forward transform: position -> momentum, unitary w.r.t. the weighted norms.
pub fn fourier_forward<const P: usize>(field: &Field<P>) -> Field<P> {
    assert_eq!(field.space, Space::Position, "field already in momentum space");
    let grid = &field.grid;
    let axes = Field::<P>::axes(grid);
    let n = grid.n;
    let mut values = field.values.clone();
    let tr = transformer(n);
    for axis in 0..axes {
        tr.fft_axis(&mut values, axes, axis, true);
    }
    // Per-axis scale dx/sqrt(2*pi); the origin offset -L contributes (-1)^k
    // per axis (n even), i.e. (-1)^{sum of bin parities}.
    let scale = (grid.dx() / (2.0 * std::f64::consts::PI).sqrt()).powi(axes as i32);
    let mut idx = vec![0usize; axes];
    for (flat, v) in values.iter_mut().enumerate() {
        unravel(flat, n, &mut idx);
        let parity: usize = idx.iter().sum();
        let sign = if parity % 2 == 0 { 1.0 } else { -1.0 };
        *v *= sign * scale;
    }
    Field {
        grid: grid.clone(),
        space: Space::Momentum,
        values,
    }
}

/// Inverse transform: momentum -> position.
pub fn fourier_inverse<const P: usize>(field: &Field<P>) -> Field<P> {
    assert_eq!(field.space, Space::Momentum, "field already in position space");
    let grid = &field.grid;
    let axes = Field::<P>::axes(grid);
    let n = grid.n;
    let mut values = field.values.clone();
    let scale = (grid.dp() / (2.0 * std::f64::consts::PI).sqrt()).powi(axes as i32);
    let mut idx = vec![0usize; axes];
    for (flat, v) in values.iter_mut().enumerate() {
        unravel(flat, n, &mut idx);
        let parity: usize = idx.iter().sum();
        let sign = if parity % 2 == 0 { 1.0 } else { -1.0 };
        *v *= sign * scale;
    }
    let tr = transformer(n);
    for axis in 0..axes {
        tr.fft_axis(&mut values, axes, axis, false);
    }
    Field {
        grid: grid.clone(),
        space: Space::Position,
        values,
    }
}

/// Move a field to the requested representation (no-op if already there).
pub fn to_space<const P: usize>(field: &Field<P>, space: Space) -> Field<P> {
    if field.space == space {
        field.clone()
    } else {
        match space {
            Space::Momentum => fourier_forward(field),
            Space::Position => fourier_inverse(field),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64 as C;

    fn grid_16() -> GridSpec {
        make_grid(1, 16, 8.0).unwrap()
    }

    #[test]
    fn make_grid_derived_quantities() {
        let g = grid_16();
        assert_eq!(g.dx(), 1.0);
        // dx * n = 2L exactly
        assert_eq!(g.dx() * g.n as f64, 2.0 * g.box_half_length);
        // momentum spacing pi/8
        assert!((g.dp() - std::f64::consts::PI / 8.0).abs() < 1e-15);
        // integer lattice when L = pi
        let gi = make_grid(1, 16, std::f64::consts::PI).unwrap();
        assert!((gi.p_at(1) - 1.0).abs() < 1e-15);
        assert!((gi.p_at(15) - (-1.0)).abs() < 1e-15);
        assert!((gi.p_at(8) - (-8.0)).abs() < 1e-14);
    }

    #[test]
    fn make_grid_rejects_bad_input() {
        assert!(make_grid(1, 10, 8.0).is_err());
        assert!(make_grid(1, 16, 0.0).is_err());
        assert!(make_grid(1, 16, -3.0).is_err());
        assert!(make_grid(3, 16, 8.0).is_err());
        assert!(make_grid(1, 8, 8.0).is_err());
    }

    #[test]
    fn momentum_lattice_symmetric_up_to_nyquist() {
        let g = grid_16();
        for k in 1..8 {
            assert!((g.p_at(k) + g.p_at(16 - k)).abs() < 1e-15);
        }
        assert!((g.p_at(8) + 8.0 * g.dp()).abs() < 1e-15); // single Nyquist point
    }

    #[test]
    fn constant_field_norm() {
        let g = grid_16();
        let f = Field::<1>::from_fn(&g, Space::Position, |_| C::new(1.0, 0.0));
        // ||f||^2 = sum 1 * dx = 2L = 16
        assert!((f.norm_sqr() - 16.0).abs() < 1e-12);
        let f2 = Field::<2>::from_fn(&g, Space::Position, |_| C::new(1.0, 0.0));
        assert!((f2.norm_sqr() - 256.0).abs() < 1e-9);
    }

    #[test]
    fn inner_product_conjugate_linear_and_orthogonality() {
        let g = grid_16();
        let f = Field::<1>::from_fn(&g, Space::Position, |x| C::new(x[0], 0.3 * x[0]));
        let ip = inner_product(&f, &f).unwrap();
        assert!(ip.im.abs() < 1e-12);
        assert!((ip.re - f.norm_sqr()).abs() < 1e-10);

        // orthogonal plane waves
        let pj = g.p_at(2);
        let pk = g.p_at(5);
        let a = Field::<1>::from_fn(&g, Space::Position, |x| C::from_polar(1.0, pj * x[0]));
        let b = Field::<1>::from_fn(&g, Space::Position, |x| C::from_polar(1.0, pk * x[0]));
        assert!(inner_product(&a, &b).unwrap().norm() < 1e-12);
    }

    #[test]
    fn round_trip_identity() {
        let g = make_grid(1, 64, 10.0).unwrap();
        let f = Field::<1>::from_fn(&g, Space::Position, |x| {
            C::new((-0.3 * x[0] * x[0]).exp(), (0.7 * x[0]).sin())
        });
        let back = fourier_inverse(&fourier_forward(&f));
        let rel = l2_distance(&f, &back).unwrap() / f.l2_norm();
        assert!(rel < 1e-12, "round trip rel error {rel}");
    }

    #[test]
    fn gaussian_transform_oracle() {
        // exp(-x^2/2) -> exp(-p^2/2) under the unitary convention.
        let g = make_grid(1, 256, 20.0).unwrap();
        let f = Field::<1>::from_fn(&g, Space::Position, |x| {
            C::new((-0.5 * x[0] * x[0]).exp(), 0.0)
        });
        let fh = fourier_forward(&f);
        let expect = Field::<1>::from_fn(&g, Space::Momentum, |p| {
            C::new((-0.5 * p[0] * p[0]).exp(), 0.0)
        });
        let rel = l2_distance(&fh, &expect).unwrap() / expect.l2_norm();
        assert!(rel < 1e-12, "gaussian transform rel error {rel}");
    }

    #[test]
    fn parseval() {
        let g = make_grid(1, 128, 12.0).unwrap();
        let f = Field::<1>::from_fn(&g, Space::Position, |x| {
            C::new((-(x[0] - 1.0).powi(2) / 3.0).exp(), (1.3 * x[0]).cos())
        });
        let fh = fourier_forward(&f);
        assert!((f.l2_norm() - fh.l2_norm()).abs() / f.l2_norm() < 1e-12);
    }

    #[test]
    fn parseval_two_particle() {
        let g = make_grid(1, 32, 6.0).unwrap();
        let f = Field::<2>::from_fn(&g, Space::Position, |x| {
            C::new(
                (-(x[0] * x[0] + 0.5 * x[1] * x[1]) / 2.0).exp(),
                0.2 * (x[0] - x[1]),
            )
        });
        let fh = fourier_forward(&f);
        assert!((f.l2_norm() - fh.l2_norm()).abs() / f.l2_norm() < 1e-12);
        let back = fourier_inverse(&fh);
        assert!(l2_distance(&f, &back).unwrap() / f.l2_norm() < 1e-12);
    }

    #[test]
    fn plane_wave_lands_on_single_bin() {
        let g = grid_16();
        let p3 = g.p_at(3);
        let f = Field::<1>::from_fn(&g, Space::Position, |x| C::from_polar(1.0, p3 * x[0]));
        let fh = fourier_forward(&f);
        let mags: Vec<f64> = fh.values.iter().map(|v| v.norm()).collect();
        let (kmax, _) = mags
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        assert_eq!(kmax, 3);
        let off: f64 = mags
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != 3)
            .map(|(_, m)| m * m)
            .sum();
        assert!(off.sqrt() < 1e-12 * mags[3]);
    }

    #[test]
    fn norm_refinement_stable() {
        // band-limited smooth function: norm changes < 1e-10 when doubling n
        let g1 = make_grid(1, 64, 10.0).unwrap();
        let g2 = make_grid(1, 128, 10.0).unwrap();
        let f = |x: &[f64]| C::new((-0.5 * x[0] * x[0]).exp() * (0.8 * x[0]).cos(), 0.0);
        let n1 = Field::<1>::from_fn(&g1, Space::Position, f).l2_norm();
        let n2 = Field::<1>::from_fn(&g2, Space::Position, f).l2_norm();
        assert!((n1 - n2).abs() < 1e-10, "norms {n1} vs {n2}");
    }

    #[test]
    fn boundary_mass_detects_edge_amplitude() {
        let g = grid_16();
        let mut f = Field::<1>::zeros(&g, Space::Position);
        f.values[0] = C::new(1.0, 0.0); // x = -8, at the edge
        assert!(f.boundary_mass_fraction(0.05) > 0.99);
        let mut c = Field::<1>::zeros(&g, Space::Position);
        c.values[8] = C::new(1.0, 0.0); // x = 0
        assert_eq!(c.boundary_mass_fraction(0.05), 0.0);
    }
}
