//! Construction of the smooth convex localization function R on the scaled
//! two-particle configuration space: R = eta * sup{g, 0} with
//! g(x~) = (u^2 + beta v^2 - c) F(x~) in the rotated coordinates
//! u = (x1+x2)/sqrt(2), v = (x1-x2)/sqrt(2), where F is a radial bump equal
//! to 1 on C_{r1} and supported in C_{r1'}, and eta is a radial mollifier of
//! radius eps'.
//!
//! Derivatives of R are evaluated through the distributional form of the
//! convolution: the second derivative of sup{g,0} is the smooth Hessian of g
//! on {g > 0} plus a rank-one surface measure |grad g| n n^T on the kink
//! curve {g = 0}. Both parts are mollified by quadrature along a tube around
//! the kink; away from the kink the convolution of the quadratic is exact in
//! closed form. On C_r this makes the evaluated Hessian a sum of positive
//! semidefinite terms, matching the convexity of R itself, with
//! superalgebraic quadrature accuracy. Central finite differences of the
//! sampled R remain available as an independent cross-check.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bump::{bump, gauss_legendre, gauss_legendre_composite, transition_down};
use crate::error::{Error, Result};

const SQRT2: f64 = std::f64::consts::SQRT_2;

/// Compact region of the scaled two-particle plane (d = 1: points (x1, x2)),
/// given as a union of radial/box parts with every point at least
/// `diag_min` away from the diagonal {x1 = x2}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionSpec {
    pub parts: Vec<RegionPart>,
    /// Required minimum of |x1 - x2| over the region.
    pub diag_min: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum RegionPart {
    /// r1 <= |x~| <= r2
    Annulus { r1: f64, r2: f64 },
    /// axis-aligned box in (x1, x2)
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl RegionSpec {
    /// The reference shape: {r1 <= |x~| <= r2} with |x1 - x2| >= diag_min.
    pub fn annulus_minus_tube(r1: f64, r2: f64, diag_min: f64) -> Result<Self> {
        if diag_min <= 0.0 {
            return Err(Error::validation(
                "region must keep positive distance to the diagonal",
            ));
        }
        if !(r2 > r1 && r1 >= 0.0) {
            return Err(Error::validation("annulus radii must satisfy 0 <= r1 < r2"));
        }
        Ok(RegionSpec {
            parts: vec![RegionPart::Annulus { r1, r2 }],
            diag_min,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.diag_min <= 0.0 {
            return Err(Error::validation(
                "region touches the diagonal (diag_min must be > 0)",
            ));
        }
        if self.parts.is_empty() {
            return Err(Error::validation("region has no parts"));
        }
        Ok(())
    }

    pub fn contains(&self, y: &[f64]) -> bool {
        let d = y.len() / 2;
        let rel: f64 = (0..d)
            .map(|a| (y[a] - y[d + a]) * (y[a] - y[d + a]))
            .sum::<f64>()
            .sqrt();
        if rel < self.diag_min {
            return false;
        }
        let r: f64 = y.iter().map(|c| c * c).sum::<f64>().sqrt();
        self.parts.iter().any(|p| match p {
            RegionPart::Annulus { r1, r2 } => r >= *r1 && r <= *r2,
            RegionPart::Box { lo, hi } => y
                .iter()
                .zip(lo.iter().zip(hi.iter()))
                .all(|(c, (a, b))| c >= a && c <= b),
        })
    }

    /// Outer radius of the region description.
    pub fn outer_radius(&self) -> f64 {
        self.parts
            .iter()
            .map(|p| match p {
                RegionPart::Annulus { r2, .. } => *r2,
                RegionPart::Box { lo, hi } => {
                    let a: f64 = lo.iter().map(|c| c * c).sum();
                    let b: f64 = hi.iter().map(|c| c * c).sum();
                    a.max(b).sqrt()
                }
            })
            .fold(0.0, f64::max)
    }

    /// Minimum of |x1 - x2|/sqrt(2) over the region (v-coordinate minimum).
    pub fn v_min(&self) -> f64 {
        self.diag_min / SQRT2
    }
}

/// Radii and derived constants of the construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrafParams {
    pub r: f64,
    pub r1: f64,
    pub r1p: f64,
    pub rp: f64,
    pub beta: f64,
    /// Offset, fixed to rp^2.
    pub c: f64,
    /// Diagonal tube half-width in |x1 - x2| units (eps = eps_beta / 2).
    pub eps: f64,
    /// Mollifier radius (eps' = eps / 8).
    pub epsp: f64,
}

impl GrafParams {
    pub fn validate(&self) -> Result<()> {
        if !(SQRT2 < self.r && self.r < self.r1 && self.r1 < self.r1p && self.r1p < self.rp) {
            return Err(Error::validation(format!(
                "radii must satisfy sqrt(2) < r < r1 < r1' < r', got \
                 r={}, r1={}, r1'={}, r'={}",
                self.r, self.r1, self.r1p, self.rp
            )));
        }
        if (self.c - self.rp * self.rp).abs() > 1e-12 * self.c {
            return Err(Error::validation("offset c must equal r'^2"));
        }
        let eps_beta = self.eps_beta();
        if self.eps > eps_beta * (1.0 + 1e-12) {
            return Err(Error::validation(format!(
                "eps = {} exceeds eps_beta = {eps_beta}",
                self.eps
            )));
        }
        if self.epsp >= self.eps / 4.0 {
            return Err(Error::validation(
                "mollifier radius must satisfy eps' < eps/4",
            ));
        }
        Ok(())
    }

    /// Largest diagonal-tube width on which sup{g,0} vanishes:
    /// on supp F, u^2 <= r1'^2, so g <= 0 whenever beta v^2 <= r'^2 - r1'^2,
    /// i.e. |x1 - x2| <= sqrt(2 (r'^2 - r1'^2)/beta).
    pub fn eps_beta(&self) -> f64 {
        (2.0 * (self.rp * self.rp - self.r1p * self.r1p) / self.beta).sqrt()
    }
}

/// Default radii used by [`choose_params`]; `rp` is the outer radius r'.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadiusDefaults {
    pub rp: f64,
    pub r: Option<f64>,
    pub r1: Option<f64>,
    pub r1p: Option<f64>,
}

impl Default for RadiusDefaults {
    fn default() -> Self {
        RadiusDefaults {
            rp: 4.0,
            r: None,
            r1: None,
            r1p: None,
        }
    }
}

/// Choose construction parameters for a region K:
/// c = r'^2, beta = 2c / v_min^2 with v_min = min_K |x1 - x2| / sqrt(2)
/// (so that u^2 + beta v^2 - c >= c > 0 on K), eps = eps_beta / 2,
/// eps' = eps / 8.
pub fn choose_params(k: &RegionSpec, defaults: &RadiusDefaults) -> Result<GrafParams> {
    k.validate()?;
    let v_min = k.v_min();
    if v_min <= 0.0 {
        return Err(Error::validation("region touches the diagonal"));
    }
    let outer = k.outer_radius();
    let r = defaults
        .r
        .unwrap_or_else(|| (1.02 * SQRT2).max(1.05 * outer));
    if outer > r {
        return Err(Error::validation(format!(
            "region (outer radius {outer}) is not enclosed by C_r with r = {r}"
        )));
    }
    if r <= SQRT2 {
        return Err(Error::validation("r must exceed sqrt(2)"));
    }
    let rp = defaults.rp;
    if rp <= r {
        return Err(Error::validation("r' must exceed r"));
    }
    let r1 = defaults.r1.unwrap_or(r + 0.10 * (rp - r));
    let r1p = defaults.r1p.unwrap_or(r + 0.20 * (rp - r));
    let c = rp * rp;
    let beta = 2.0 * c / (v_min * v_min);
    let eps_beta = (2.0 * (c - r1p * r1p) / beta).sqrt();
    let eps = 0.5 * eps_beta;
    let params = GrafParams {
        r,
        r1,
        r1p,
        rp,
        beta,
        c,
        eps,
        epsp: eps / 8.0,
    };
    params.validate()?;
    Ok(params)
}

/// Evaluation-grid and quadrature options for [`build`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrafBuildOptions {
    /// Evaluation-grid cells per mollifier radius (the support diameter then
    /// spans twice this many cells; fewer than 2 is rejected).
    pub cells_per_mollifier_radius: usize,
    /// Gauss-Legendre panels per window axis for the smooth-window path.
    pub window_panels: usize,
}

impl Default for GrafBuildOptions {
    fn default() -> Self {
        GrafBuildOptions {
            cells_per_mollifier_radius: 4,
            window_panels: 3,
        }
    }
}

/// Uniform evaluation grid over [-(r'+1), r'+1]^2 in the scaled variable.
#[derive(Debug, Clone, Serialize)]
pub struct EvalGrid {
    pub origin: f64,
    pub spacing: f64,
    pub n_axis: usize,
}

impl EvalGrid {
    pub fn coord(&self, j: usize) -> f64 {
        self.origin + j as f64 * self.spacing
    }
    pub fn len(&self) -> usize {
        self.n_axis * self.n_axis
    }
    pub fn is_empty(&self) -> bool {
        self.n_axis == 0
    }
}

/// The built function: R sampled on the evaluation grid plus the exact
/// convolution evaluator for derivatives.
pub struct GrafFunction {
    pub params: GrafParams,
    pub grid: EvalGrid,
    /// R at grid point (j1, j2) in x~-coordinates, row-major.
    pub r_samples: Vec<f64>,
    pub evaluator: Evaluator,
    pub options: GrafBuildOptions,
}

/// Semi-analytic convolution evaluator in the rotated (u, v) frame.
pub struct Evaluator {
    params: GrafParams,
    /// Normalization of the 2-d mollifier: eta = bump(|z|/eps') / z2.
    z2: f64,
    /// Second moment of eta per axis.
    m2: f64,
    /// 1-d bump mass, used by the F-profile derivatives.
    z1: f64,
    /// Dense nodes of the kink curve {u^2 + beta v^2 = c}.
    nodes: Vec<KinkNode>,
    /// Spatial bins (size eps') over (u, v) for node lookup.
    bins: std::collections::HashMap<(i64, i64), Vec<u32>>,
}

#[derive(Debug, Clone, Copy)]
struct KinkNode {
    u: f64,
    v: f64,
    /// unit outward normal (towards g > 0)
    nu: f64,
    nv: f64,
    /// tangent vector z'(theta) (not normalized)
    tu: f64,
    tv: f64,
    /// derivative of the unit normal with respect to theta
    npu: f64,
    npv: f64,
    /// arc weight dtheta
    w: f64,
}

/// Pointwise evaluation output (x~ frame).
#[derive(Debug, Clone, Copy, Default)]
pub struct PointEval {
    pub r: f64,
    pub grad: [f64; 2],
    /// Hessian entries [h11, h12, h22].
    pub hess: [f64; 3],
}

impl Evaluator {
    fn new(params: &GrafParams) -> Result<Self> {
        let epsp = params.epsp;
        let z2_unit = 2.0 * std::f64::consts::PI
            * gauss_legendre_composite(|r| bump(r) * r, 0.0, 1.0, 8);
        let m2_unit = std::f64::consts::PI
            * gauss_legendre_composite(|r| bump(r) * r * r * r, 0.0, 1.0, 8)
            / z2_unit;
        let z2 = z2_unit * epsp * epsp;
        let m2 = m2_unit * epsp * epsp;
        let z1 = gauss_legendre_composite(bump, -1.0, 1.0, 8);

        // dense parametrization of the kink ellipse u = sqrt(c) cos th,
        // v = sqrt(c/beta) sin th, arc step about eps'/12
        let ae = params.c.sqrt();
        let be = (params.c / params.beta).sqrt();
        let perimeter_bound = 4.0 * (ae + be);
        let n_nodes = ((perimeter_bound / (epsp / 12.0)).ceil() as usize).max(1024);
        let dth = 2.0 * std::f64::consts::PI / n_nodes as f64;
        let mut nodes = Vec::with_capacity(n_nodes);
        for i in 0..n_nodes {
            let th = (i as f64 + 0.5) * dth;
            let (s, c0) = th.sin_cos();
            let u = ae * c0;
            let v = be * s;
            let tu = -ae * s;
            let tv = be * c0;
            let gn = 2.0 * (u * u + params.beta * params.beta * v * v).sqrt();
            let nu = 2.0 * u / gn;
            let nv = 2.0 * params.beta * v / gn;
            nodes.push(KinkNode {
                u,
                v,
                nu,
                nv,
                tu,
                tv,
                npu: 0.0,
                npv: 0.0,
                w: dth,
            });
        }
        let n_total = nodes.len();
        for i in 0..n_total {
            let prev = nodes[(i + n_total - 1) % n_total];
            let next = nodes[(i + 1) % n_total];
            nodes[i].npu = (next.nu - prev.nu) / (2.0 * dth);
            nodes[i].npv = (next.nv - prev.nv) / (2.0 * dth);
        }

        let mut bins: std::collections::HashMap<(i64, i64), Vec<u32>> =
            std::collections::HashMap::new();
        for (i, nd) in nodes.iter().enumerate() {
            bins.entry(bin_of(nd.u, nd.v, epsp))
                .or_default()
                .push(i as u32);
        }

        Ok(Evaluator {
            params: params.clone(),
            z2,
            m2,
            z1,
            nodes,
            bins,
        })
    }

    fn eta(&self, du: f64, dv: f64) -> f64 {
        let r = (du * du + dv * dv).sqrt() / self.params.epsp;
        bump(r) / self.z2
    }

    /// F(rho) and its first two radial derivatives.
    fn f_radial(&self, rho: f64) -> (f64, f64, f64) {
        let p = &self.params;
        let w = p.r1p - p.r1;
        if rho <= p.r1 {
            (1.0, 0.0, 0.0)
        } else if rho >= p.r1p {
            (0.0, 0.0, 0.0)
        } else {
            let sig = 2.0 * (rho - p.r1) / w - 1.0;
            let f = transition_down(rho, p.r1, p.r1p);
            let fp = -(2.0 / w) * bump(sig) / self.z1;
            // bump'(s) = bump(s) * (-2 s / (1 - s^2)^2)
            let bprime = if sig.abs() < 1.0 {
                bump(sig) * (-2.0 * sig / (1.0 - sig * sig).powi(2))
            } else {
                0.0
            };
            let fpp = (2.0 / w) * (2.0 / w) * (-bprime) / self.z1;
            (f, fp, fpp)
        }
    }

    fn gq(&self, u: f64, v: f64) -> f64 {
        u * u + self.params.beta * v * v - self.params.c
    }

    /// value, gradient and Hessian of the smooth branch g_q * F at (u, v).
    fn r0_smooth(&self, u: f64, v: f64) -> (f64, [f64; 2], [f64; 3]) {
        let p = &self.params;
        let rho = (u * u + v * v).sqrt();
        let (f, fp, fpp) = self.f_radial(rho);
        let gq = self.gq(u, v);
        let dg = [2.0 * u, 2.0 * p.beta * v];
        if fp == 0.0 && fpp == 0.0 {
            return (
                gq * f,
                [dg[0] * f, dg[1] * f],
                [2.0 * f, 0.0, 2.0 * p.beta * f],
            );
        }
        let (eu, ev) = (u / rho, v / rho);
        let dfu = fp * eu;
        let dfv = fp * ev;
        let hf = [
            fpp * eu * eu + fp / rho * (1.0 - eu * eu),
            fpp * eu * ev - fp / rho * eu * ev,
            fpp * ev * ev + fp / rho * (1.0 - ev * ev),
        ];
        let val = gq * f;
        let grad = [dg[0] * f + gq * dfu, dg[1] * f + gq * dfv];
        let hess = [
            2.0 * f + 2.0 * dg[0] * dfu + gq * hf[0],
            dg[0] * dfv + dg[1] * dfu + gq * hf[1],
            2.0 * p.beta * f + 2.0 * dg[1] * dfv + gq * hf[2],
        ];
        (val, grad, hess)
    }

    /// Evaluate R and derivatives at an x~-frame point (y1, y2).
    pub fn eval_point(&self, y1: f64, y2: f64, opts: &GrafBuildOptions) -> PointEval {
        let u = (y1 + y2) / SQRT2;
        let v = (y1 - y2) / SQRT2;
        let out = self.eval_uv(u, v, opts);
        // rotate back: y-gradient = Q grad_z, H_y = Q H_z Q with
        // Q = [[1,1],[1,-1]]/sqrt(2); eigenvalues are unchanged
        let g = out.grad;
        let gy = [(g[0] + g[1]) / SQRT2, (g[0] - g[1]) / SQRT2];
        let h = out.hess;
        let h11 = 0.5 * (h[0] + 2.0 * h[1] + h[2]);
        let h12 = 0.5 * (h[0] - h[2]);
        let h22 = 0.5 * (h[0] - 2.0 * h[1] + h[2]);
        PointEval {
            r: out.r,
            grad: gy,
            hess: [h11, h12, h22],
        }
    }

    fn eval_uv(&self, u: f64, v: f64, opts: &GrafBuildOptions) -> PointEval {
        let p = &self.params;
        let epsp = p.epsp;
        let rho = (u * u + v * v).sqrt();
        if rho >= p.r1p + epsp {
            return PointEval::default();
        }
        let gq = self.gq(u, v);
        let dgnorm = 2.0 * (u * u + p.beta * p.beta * v * v).sqrt();
        let lip = dgnorm + (2.0 + 2.0 * p.beta) * epsp;
        if gq.abs() > 1.3 * lip * epsp {
            if gq < 0.0 {
                return PointEval::default();
            }
            if rho + epsp <= p.r1 {
                // window entirely inside { g > 0, F == 1 }: closed form
                return PointEval {
                    r: gq + self.m2 * (1.0 + p.beta),
                    grad: [2.0 * u, 2.0 * p.beta * v],
                    hess: [2.0, 0.0, 2.0 * p.beta],
                };
            }
            return self.window_quadrature(u, v, opts);
        }
        self.tube_quadrature(u, v)
    }

    /// Tensor Gauss-Legendre over the mollifier window; valid when the
    /// integrand is smooth there (g_q keeps its sign on the window).
    fn window_quadrature(&self, u: f64, v: f64, opts: &GrafBuildOptions) -> PointEval {
        let epsp = self.params.epsp;
        let panels = opts.window_panels.max(2);
        let step = 2.0 * epsp / panels as f64;
        let mut comps = [0.0f64; 6];
        for (ci, comp) in comps.iter_mut().enumerate() {
            let mut acc = 0.0;
            for i in 0..panels {
                let a0 = -epsp + i as f64 * step;
                for j in 0..panels {
                    let b0 = -epsp + j as f64 * step;
                    acc += gauss_legendre(
                        |du| {
                            gauss_legendre(
                                |dv| {
                                    let eta = self.eta(du, dv);
                                    if eta == 0.0 {
                                        return 0.0;
                                    }
                                    let (val, g, h) = self.r0_smooth(u - du, v - dv);
                                    eta * match ci {
                                        0 => val,
                                        1 => g[0],
                                        2 => g[1],
                                        3 => h[0],
                                        4 => h[1],
                                        _ => h[2],
                                    }
                                },
                                b0,
                                b0 + step,
                            )
                        },
                        a0,
                        a0 + step,
                    );
                }
            }
            *comp = acc;
        }
        PointEval {
            r: comps[0],
            grad: [comps[1], comps[2]],
            hess: [comps[3], comps[4], comps[5]],
        }
    }

    /// Tube quadrature near the kink: volume over the g > 0 side plus the
    /// rank-one surface term with density F |grad g_q|.
    fn tube_quadrature(&self, u: f64, v: f64) -> PointEval {
        let p = &self.params;
        let epsp = p.epsp;
        let reach = 3.0 * epsp;
        let center = bin_of(u, v, epsp);
        let mut out = PointEval::default();
        for bi in -3..=3i64 {
            for bj in -3..=3i64 {
                let Some(list) = self.bins.get(&(center.0 + bi, center.1 + bj)) else {
                    continue;
                };
                for &idx in list {
                    let nd = self.nodes[idx as usize];
                    let du0 = u - nd.u;
                    let dv0 = v - nd.v;
                    if du0 * du0 + dv0 * dv0 > reach * reach {
                        continue;
                    }
                    // surface term
                    let eta0 = self.eta(du0, dv0);
                    if eta0 > 0.0 {
                        let speed = (nd.tu * nd.tu + nd.tv * nd.tv).sqrt();
                        let rho_e = (nd.u * nd.u + nd.v * nd.v).sqrt();
                        let (f, _, _) = self.f_radial(rho_e);
                        let dgn =
                            2.0 * (nd.u * nd.u + p.beta * p.beta * nd.v * nd.v).sqrt();
                        let wgt = eta0 * f * dgn * speed * nd.w;
                        out.hess[0] += wgt * nd.nu * nd.nu;
                        out.hess[1] += wgt * nd.nu * nd.nv;
                        out.hess[2] += wgt * nd.nv * nd.nv;
                    }
                    // volume along the outward ray: z = z_e + tau n,
                    // Jacobian |z'(theta) + tau n'(theta)| dtheta dtau
                    let mut comps = [0.0f64; 6];
                    for (ci, comp) in comps.iter_mut().enumerate() {
                        *comp = gauss_legendre(
                            |tau| {
                                let zu = nd.u + tau * nd.nu;
                                let zv = nd.v + tau * nd.nv;
                                let eta = self.eta(u - zu, v - zv);
                                if eta == 0.0 {
                                    return 0.0;
                                }
                                let ju = nd.tu + tau * nd.npu;
                                let jv = nd.tv + tau * nd.npv;
                                let jac = (ju * ju + jv * jv).sqrt();
                                let (val, g, h) = self.r0_smooth(zu, zv);
                                eta * jac
                                    * match ci {
                                        0 => val,
                                        1 => g[0],
                                        2 => g[1],
                                        3 => h[0],
                                        4 => h[1],
                                        _ => h[2],
                                    }
                            },
                            0.0,
                            reach,
                        ) * nd.w;
                    }
                    out.r += comps[0];
                    out.grad[0] += comps[1];
                    out.grad[1] += comps[2];
                    out.hess[0] += comps[3];
                    out.hess[1] += comps[4];
                    out.hess[2] += comps[5];
                }
            }
        }
        out
    }
}

fn bin_of(u: f64, v: f64, epsp: f64) -> (i64, i64) {
    ((u / epsp).floor() as i64, (v / epsp).floor() as i64)
}

/// Build R on the evaluation grid covering C_{r'+1}.
pub fn build(params: &GrafParams, opts: &GrafBuildOptions) -> Result<GrafFunction> {
    params.validate()?;
    if opts.cells_per_mollifier_radius < 2 {
        return Err(Error::validation(format!(
            "mollifier support under-resolved: {} cells per radius gives fewer than \
             4 cells across the support; increase the evaluation-grid resolution",
            opts.cells_per_mollifier_radius
        )));
    }
    let half = params.rp + 1.0;
    let spacing = params.epsp / opts.cells_per_mollifier_radius as f64;
    let n_axis = (2.0 * half / spacing).ceil() as usize + 1;
    let grid = EvalGrid {
        origin: -half,
        spacing,
        n_axis,
    };
    let evaluator = Evaluator::new(params)?;

    let n = grid.n_axis;
    let mut r_samples = vec![0.0f64; n * n];
    let rows: Vec<(usize, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|j1| {
            let y1 = grid.coord(j1);
            let mut row = vec![0.0f64; n];
            for (j2, slot) in row.iter_mut().enumerate() {
                let y2 = grid.coord(j2);
                *slot = evaluator.eval_point(y1, y2, opts).r;
            }
            (j1, row)
        })
        .collect();
    for (j1, row) in rows {
        r_samples[j1 * n..(j1 + 1) * n].copy_from_slice(&row);
    }

    Ok(GrafFunction {
        params: params.clone(),
        grid,
        r_samples,
        evaluator,
        options: opts.clone(),
    })
}

impl GrafFunction {
    pub fn value_at(&self, j1: usize, j2: usize) -> f64 {
        self.r_samples[j1 * self.grid.n_axis + j2]
    }

    /// Central-difference Hessian from the sampled R (independent
    /// cross-check of the convolution evaluator; noisy near the kink).
    pub fn hessian_fd(&self, j1: usize, j2: usize) -> Option<[f64; 3]> {
        let n = self.grid.n_axis;
        if j1 < 1 || j2 < 1 || j1 + 1 >= n || j2 + 1 >= n {
            return None;
        }
        let h = self.grid.spacing;
        let v = |a: usize, b: usize| self.r_samples[a * n + b];
        let d11 = (v(j1 + 1, j2) - 2.0 * v(j1, j2) + v(j1 - 1, j2)) / (h * h);
        let d22 = (v(j1, j2 + 1) - 2.0 * v(j1, j2) + v(j1, j2 - 1)) / (h * h);
        let d12 = (v(j1 + 1, j2 + 1) + v(j1 - 1, j2 - 1)
            - v(j1 + 1, j2 - 1)
            - v(j1 - 1, j2 + 1))
            / (4.0 * h * h);
        Some([d11, d12, d22])
    }

    /// Central-difference gradient from the sampled R.
    pub fn grad_fd(&self, j1: usize, j2: usize) -> Option<[f64; 2]> {
        let n = self.grid.n_axis;
        if j1 < 1 || j2 < 1 || j1 + 1 >= n || j2 + 1 >= n {
            return None;
        }
        let h = self.grid.spacing;
        let v = |a: usize, b: usize| self.r_samples[a * n + b];
        Some([
            (v(j1 + 1, j2) - v(j1 - 1, j2)) / (2.0 * h),
            (v(j1, j2 + 1) - v(j1, j2 - 1)) / (2.0 * h),
        ])
    }

    /// Largest |4th central difference| / h^4 over interior samples along
    /// the axes; a smoothness-at-sampling-scale measure.
    pub fn fourth_difference_bound(&self) -> f64 {
        let n = self.grid.n_axis;
        let h4 = self.grid.spacing.powi(4);
        let v = |a: usize, b: usize| self.r_samples[a * n + b];
        let mut best = 0.0f64;
        for j1 in 2..n - 2 {
            for j2 in 2..n - 2 {
                let a = v(j1 - 2, j2) - 4.0 * v(j1 - 1, j2) + 6.0 * v(j1, j2)
                    - 4.0 * v(j1 + 1, j2)
                    + v(j1 + 2, j2);
                let b = v(j1, j2 - 2) - 4.0 * v(j1, j2 - 1) + 6.0 * v(j1, j2)
                    - 4.0 * v(j1, j2 + 1)
                    + v(j1, j2 + 2);
                best = best.max(a.abs().max(b.abs()) / h4);
            }
        }
        best
    }

    pub fn peak(&self) -> f64 {
        self.r_samples.iter().cloned().fold(0.0, f64::max)
    }

    /// Bilinear interpolation at an arbitrary scaled point.
    pub fn value_interp(&self, y1: f64, y2: f64) -> f64 {
        let g = &self.grid;
        let a = (y1 - g.origin) / g.spacing;
        let b = (y2 - g.origin) / g.spacing;
        if a < 0.0 || b < 0.0 || a >= (g.n_axis - 1) as f64 || b >= (g.n_axis - 1) as f64 {
            return 0.0;
        }
        let i = a.floor() as usize;
        let j = b.floor() as usize;
        let fa = a - i as f64;
        let fb = b - j as f64;
        let v = |x: usize, y: usize| self.r_samples[x * g.n_axis + y];
        (1.0 - fa) * (1.0 - fb) * v(i, j)
            + fa * (1.0 - fb) * v(i + 1, j)
            + (1.0 - fa) * fb * v(i, j + 1)
            + fa * fb * v(i + 1, j + 1)
    }
}

pub fn min_eig_2x2(h: &[f64; 3]) -> f64 {
    let tr = h[0] + h[2];
    let det = h[0] * h[2] - h[1] * h[1];
    let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
    0.5 * (tr - disc)
}

/// Measured Hessian-inequality report.
#[derive(Debug, Clone, Serialize)]
pub struct HessianReport {
    /// min over K samples of the smallest Hessian eigenvalue
    pub c1: f64,
    /// max over C_{r,r'} \ D_eps samples of the negative part of the
    /// smallest eigenvalue
    pub c2: f64,
    /// max over C_{r,r'} samples of the Hessian magnitude
    pub c2_max_abs: f64,
    /// fraction of convexity-region samples with min eigenvalue below
    /// -1e-6 * hessian_scale
    pub violation_fraction: f64,
    pub hessian_scale: f64,
    pub n_k_samples: usize,
    pub n_convexity_samples: usize,
    /// worst sampled slack of
    /// min_eig + c2 1_{C_{r,r'}\D_eps} - c1 1_K (>= -tol expected)
    pub inequality_worst_slack: f64,
    pub r_peak: f64,
    pub r_on_diag_tube: f64,
    pub r_outside_support: f64,
    pub min_r: f64,
    pub fourth_difference_bound: f64,
}

/// Sample the Hessian over the evaluation grid and measure the constants of
/// the lower bound grad^2 R >= c1 1_K - c2 1_{C_{r,r'} \ D_eps}.
pub fn hessian_check(
    gf: &GrafFunction,
    k: &RegionSpec,
    opts: &GrafBuildOptions,
) -> Result<HessianReport> {
    k.validate()?;
    let p = &gf.params;
    let n = gf.grid.n_axis;

    struct RowAcc {
        c1: f64,
        c2: f64,
        c2_abs: f64,
        scale: f64,
        n_k: usize,
        n_conv: usize,
        r_diag: f64,
        r_out: f64,
        r_min: f64,
        flags: Vec<(bool, bool, bool, f64)>,
    }

    let rows: Vec<RowAcc> = (0..n)
        .into_par_iter()
        .map(|j1| {
            let y1 = gf.grid.coord(j1);
            let mut acc = RowAcc {
                c1: f64::INFINITY,
                c2: 0.0,
                c2_abs: 0.0,
                scale: 0.0,
                n_k: 0,
                n_conv: 0,
                r_diag: 0.0,
                r_out: 0.0,
                r_min: f64::INFINITY,
                flags: Vec::with_capacity(n),
            };
            for j2 in 0..n {
                let y2 = gf.grid.coord(j2);
                let e = gf.evaluator.eval_point(y1, y2, opts);
                let rval = gf.r_samples[j1 * n + j2];
                let rho = (y1 * y1 + y2 * y2).sqrt();
                let rel = (y1 - y2).abs();
                let me = min_eig_2x2(&e.hess);
                let sn = e.hess[0].abs().max(e.hess[2].abs()) + e.hess[1].abs();
                acc.scale = acc.scale.max(sn);
                acc.r_min = acc.r_min.min(rval);
                let in_k = k.contains(&[y1, y2]);
                let in_diag_nbhd = rel <= 0.5 * p.eps + 4.0 * p.epsp;
                let in_conv = rho <= p.r && !in_k && !in_diag_nbhd;
                let in_ann = rho >= p.r && rho <= p.rp && rel >= p.eps;
                if in_k {
                    acc.n_k += 1;
                    acc.c1 = acc.c1.min(me);
                }
                if in_conv {
                    acc.n_conv += 1;
                }
                if in_ann {
                    acc.c2 = acc.c2.max((-me).max(0.0));
                    acc.c2_abs = acc.c2_abs.max(sn);
                }
                if rel <= 0.5 * p.eps {
                    acc.r_diag = acc.r_diag.max(rval.abs());
                }
                if rho > p.rp + p.epsp {
                    acc.r_out = acc.r_out.max(rval.abs());
                }
                acc.flags.push((in_k, in_conv, in_ann, me));
            }
            acc
        })
        .collect();

    let mut c1 = f64::INFINITY;
    let mut c2 = 0.0f64;
    let mut c2_abs = 0.0f64;
    let mut scale = 0.0f64;
    let mut n_k = 0usize;
    let mut n_conv = 0usize;
    let mut r_diag = 0.0f64;
    let mut r_out = 0.0f64;
    let mut r_min = f64::INFINITY;
    for row in &rows {
        c1 = c1.min(row.c1);
        c2 = c2.max(row.c2);
        c2_abs = c2_abs.max(row.c2_abs);
        scale = scale.max(row.scale);
        n_k += row.n_k;
        n_conv += row.n_conv;
        r_diag = r_diag.max(row.r_diag);
        r_out = r_out.max(row.r_out);
        r_min = r_min.min(row.r_min);
    }
    if n_k == 0 {
        return Err(Error::validation(
            "no evaluation-grid samples fall inside K; refine the grid",
        ));
    }

    let tol = 1e-6 * scale;
    let mut n_bad = 0usize;
    let mut worst_slack = f64::INFINITY;
    for row in &rows {
        for &(in_k, in_conv, in_ann, me) in &row.flags {
            if in_conv && me < -tol {
                n_bad += 1;
            }
            let lhs = me + if in_ann { c2 } else { 0.0 } - if in_k { c1 } else { 0.0 };
            worst_slack = worst_slack.min(lhs);
        }
    }

    Ok(HessianReport {
        c1,
        c2,
        c2_max_abs: c2_abs,
        violation_fraction: if n_conv == 0 {
            0.0
        } else {
            n_bad as f64 / n_conv as f64
        },
        hessian_scale: scale,
        n_k_samples: n_k,
        n_convexity_samples: n_conv,
        inequality_worst_slack: worst_slack,
        r_peak: gf.peak(),
        r_on_diag_tube: r_diag,
        r_outside_support: r_out,
        min_r: r_min,
        fourth_difference_bound: gf.fourth_difference_bound(),
    })
}

/// Dense-sampled minimum of u^2 + beta v^2 - c over K (positivity of g on K
/// before truncation).
pub fn min_g_on_region(params: &GrafParams, k: &RegionSpec, samples_per_axis: usize) -> f64 {
    let outer = k.outer_radius();
    let h = 2.0 * outer / samples_per_axis as f64;
    let mut best = f64::INFINITY;
    for i in 0..=samples_per_axis {
        let y1 = -outer + i as f64 * h;
        for j in 0..=samples_per_axis {
            let y2 = -outer + j as f64 * h;
            if k.contains(&[y1, y2]) {
                let u = (y1 + y2) / SQRT2;
                let v = (y1 - y2) / SQRT2;
                best = best.min(u * u + params.beta * v * v - params.c);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_region() -> RegionSpec {
        RegionSpec::annulus_minus_tube(1.0, 2.0, 0.5).unwrap()
    }

    #[test]
    fn choose_params_reference_arithmetic() {
        let k = reference_region();
        let p = choose_params(&k, &RadiusDefaults::default()).unwrap();
        assert_eq!(p.c, 16.0); // c = r'^2 with r' = 4
        let v_min = 0.5 / SQRT2;
        assert!((p.beta - 2.0 * 16.0 / (v_min * v_min)).abs() < 1e-9);
        assert!((p.beta - 256.0).abs() < 1e-9);
        let eps_beta = (2.0 * (16.0 - p.r1p * p.r1p) / p.beta).sqrt();
        assert!((p.eps - 0.5 * eps_beta).abs() < 1e-12);
        assert!((p.epsp - p.eps / 8.0).abs() < 1e-12);
        // g > 0 on K before truncation, by at least c
        let min_g = min_g_on_region(&p, &k, 301);
        assert!(min_g >= p.c - 1e-9, "min g on K = {min_g}");
    }

    #[test]
    fn rejects_diagonal_contact() {
        assert!(RegionSpec::annulus_minus_tube(1.0, 2.0, 0.0).is_err());
        let k = RegionSpec {
            parts: vec![RegionPart::Annulus { r1: 1.0, r2: 2.0 }],
            diag_min: -1.0,
        };
        assert!(choose_params(&k, &RadiusDefaults::default()).is_err());
    }

    #[test]
    fn rejects_region_not_enclosed() {
        let k = RegionSpec::annulus_minus_tube(1.0, 5.0, 0.5).unwrap();
        let d = RadiusDefaults {
            r: Some(2.0),
            ..Default::default()
        };
        assert!(choose_params(&k, &d).is_err());
    }

    /// A fat-mollifier configuration where brute-force mollification and
    /// finite differences can independently resolve the construction.
    fn fat_params() -> GrafParams {
        let k = RegionSpec::annulus_minus_tube(1.0, 2.0, 1.2).unwrap();
        choose_params(&k, &RadiusDefaults::default()).unwrap()
    }

    #[test]
    fn evaluator_matches_brute_force_mollification() {
        let p = fat_params();
        let ev = Evaluator::new(&p).unwrap();
        let opts = GrafBuildOptions::default();
        let brute = |y1: f64, y2: f64| -> f64 {
            let u0 = (y1 + y2) / SQRT2;
            let v0 = (y1 - y2) / SQRT2;
            let nn = 260;
            let h = 2.0 * p.epsp / nn as f64;
            let mut acc = 0.0;
            for i in 0..nn {
                let du = -p.epsp + (i as f64 + 0.5) * h;
                for j in 0..nn {
                    let dv = -p.epsp + (j as f64 + 0.5) * h;
                    let eta = ev.eta(du, dv);
                    if eta == 0.0 {
                        continue;
                    }
                    let (val, _, _) = ev.r0_smooth(u0 - du, v0 - dv);
                    acc += eta * val.max(0.0) * h * h;
                }
            }
            acc
        };
        let ae = p.c.sqrt();
        let be = (p.c / p.beta).sqrt();
        let th: f64 = 0.9;
        let (eu, evv) = (ae * th.cos(), be * th.sin());
        let to_y = |u: f64, v: f64| ((u + v) / SQRT2, (u - v) / SQRT2);
        let probes = [
            to_y(1.2, 1.1),               // deep in {g>0, F=1}
            to_y(eu + 0.3 * p.epsp, evv), // just outside the kink
            to_y(eu - 0.4 * p.epsp, evv), // just inside the kink
            to_y(0.0, 0.05),              // deep zero zone
            to_y(p.r1 + 0.05, 1.2),       // F band
        ];
        for (y1, y2) in probes {
            let a = ev.eval_point(y1, y2, &opts).r;
            let b = brute(y1, y2);
            let scale = p.c.max(b.abs());
            assert!(
                (a - b).abs() < 2e-4 * scale,
                "R mismatch at ({y1:.3},{y2:.3}): evaluator {a} vs brute {b}"
            );
        }
    }

    #[test]
    fn evaluator_hessian_matches_local_fd() {
        let p = fat_params();
        let ev = Evaluator::new(&p).unwrap();
        let opts = GrafBuildOptions::default();
        let hfd = p.epsp / 24.0;
        let fd_hess = |y1: f64, y2: f64| -> [f64; 3] {
            let f = |a: f64, b: f64| ev.eval_point(a, b, &opts).r;
            let d11 = (f(y1 + hfd, y2) - 2.0 * f(y1, y2) + f(y1 - hfd, y2)) / (hfd * hfd);
            let d22 = (f(y1, y2 + hfd) - 2.0 * f(y1, y2) + f(y1, y2 - hfd)) / (hfd * hfd);
            let d12 = (f(y1 + hfd, y2 + hfd) + f(y1 - hfd, y2 - hfd)
                - f(y1 + hfd, y2 - hfd)
                - f(y1 - hfd, y2 + hfd))
                / (4.0 * hfd * hfd);
            [d11, d12, d22]
        };
        let ae = p.c.sqrt();
        let be = (p.c / p.beta).sqrt();
        let to_y = |u: f64, v: f64| ((u + v) / SQRT2, (u - v) / SQRT2);
        let th: f64 = 1.1;
        let (eu, evv) = (ae * th.cos(), be * th.sin());
        let probes = [
            to_y(1.2, 1.1),
            to_y(eu + 0.5 * p.epsp, evv),
            to_y(eu - 0.5 * p.epsp, evv),
            to_y(eu, evv),
        ];
        for (y1, y2) in probes {
            let ha = ev.eval_point(y1, y2, &opts).hess;
            let hb = fd_hess(y1, y2);
            let scale = ha
                .iter()
                .chain(hb.iter())
                .map(|x| x.abs())
                .fold(1.0, f64::max);
            for c in 0..3 {
                assert!(
                    (ha[c] - hb[c]).abs() < 0.02 * scale,
                    "hessian comp {c} at ({y1:.3},{y2:.3}): {} vs FD {}",
                    ha[c],
                    hb[c]
                );
            }
        }
        // exact zone: diag(2, 2 beta) in the rotated frame maps to
        // [[1+beta, 1-beta], [1-beta, 1+beta]] in x~ coordinates
        let (y1, y2) = to_y(1.2, 1.1);
        let h = ev.eval_point(y1, y2, &opts).hess;
        assert!((h[0] - (1.0 + p.beta)).abs() < 1e-9);
        assert!((h[1] - (1.0 - p.beta)).abs() < 1e-9);
        assert!((h[2] - (1.0 + p.beta)).abs() < 1e-9);
        assert!((min_eig_2x2(&h) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn build_and_check_fat_configuration() {
        let k = RegionSpec::annulus_minus_tube(1.0, 2.0, 1.2).unwrap();
        let p = choose_params(&k, &RadiusDefaults::default()).unwrap();
        let opts = GrafBuildOptions {
            cells_per_mollifier_radius: 3,
            window_panels: 3,
        };
        let gf = build(&p, &opts).unwrap();
        let rep = hessian_check(&gf, &k, &opts).unwrap();
        assert!(rep.c1 > 0.0, "c1 = {}", rep.c1);
        assert!((rep.c1 - 2.0).abs() < 1e-6, "c1 = {}", rep.c1);
        assert!(
            rep.violation_fraction <= 1e-3,
            "convexity violations {}",
            rep.violation_fraction
        );
        assert!(rep.r_on_diag_tube <= 1e-12 * rep.r_peak);
        assert!(rep.r_outside_support <= 1e-12 * rep.r_peak);
        assert!(rep.min_r >= -1e-12 * rep.r_peak);
        assert!(rep.inequality_worst_slack >= -1e-6 * rep.hessian_scale);
    }

    #[test]
    fn mollifier_resolution_guard() {
        let p = fat_params();
        let opts = GrafBuildOptions {
            cells_per_mollifier_radius: 1,
            window_panels: 2,
        };
        assert!(build(&p, &opts).is_err());
    }
}
