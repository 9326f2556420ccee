//! Kernel projections `P` of the transport operators.
//!
//! For a homogeneous equilibrium (zero fields) the projection of a spatial
//! function has a closed form: at invariants `(e, p)` it is the average of
//! the function over the part of the cross-section disk where the particle
//! can travel, `a + r cos(theta) > |p| / sqrt(e^2 - 1)` — the disk clipped
//! against a half-plane. In general no closed form is attempted: projections
//! are evaluated as long-time averages along the reflected characteristics,
//! tabulated on an invariant lattice, with an ergodicity diagnostic from
//! seed pairs.

use crate::equilibrium::Equilibrium;
use crate::geometry::{gauss_legendre, CrossSectionGrid};
use crate::profiles::Species;
use crate::trajectories::{walk_forward, IntegrateOptions, PhasePoint, PhaseState};
use crate::{Error, Result};
use nalgebra::DMatrix;
use rayon::prelude::*;

/// Accessible cross-section region of a homogeneous-equilibrium invariant
/// level set: the unit disk clipped against `y1 > threshold`.
#[derive(Debug, Clone, Copy)]
pub struct LevelSetRegion {
    pub e: f64,
    pub p: f64,
    /// half-plane cut in the cross-section coordinate `y1 = r cos(theta)`
    pub threshold: f64,
}

impl LevelSetRegion {
    pub fn new(a: f64, e: f64, p: f64) -> Result<Self> {
        if e <= 1.0 {
            return Err(Error::Domain(format!("level set needs e > 1, got {e}")));
        }
        let threshold = p.abs() / (e * e - 1.0).sqrt() - a;
        Ok(Self { e, p, threshold })
    }

    /// `int_region r dr dtheta`, the area of the clipped disk.
    pub fn measure(&self) -> f64 {
        let t = self.threshold;
        if t <= -1.0 {
            std::f64::consts::PI
        } else if t >= 1.0 {
            0.0
        } else {
            t.acos() - t * (1.0 - t * t).sqrt()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.threshold >= 1.0
    }

    /// Radial interval cut out of the ray at angle `theta`.
    fn ray_interval(&self, theta: f64) -> Option<(f64, f64)> {
        let t = self.threshold;
        let c = theta.cos();
        if c > 1e-14 {
            let lo = t / c;
            if lo >= 1.0 {
                None
            } else {
                Some((lo.max(0.0), 1.0))
            }
        } else if c < -1e-14 {
            if t >= 0.0 {
                None
            } else {
                let hi = (t / c).min(1.0);
                if hi <= 0.0 {
                    None
                } else {
                    Some((0.0, hi))
                }
            }
        } else if t < 0.0 {
            Some((0.0, 1.0))
        } else {
            None
        }
    }

    /// `int_region f r dr dtheta` by ray-clipped polar quadrature with the
    /// chord endpoints taken analytically.
    pub fn integrate(&self, n_theta: usize, n_r: usize, mut f: impl FnMut(f64, f64) -> f64) -> f64 {
        let (gx, gw) = gauss_legendre(n_r);
        let dth = std::f64::consts::TAU / n_theta as f64;
        let mut acc = 0.0;
        for j in 0..n_theta {
            let theta = (j as f64 + 0.5) * dth;
            if let Some((lo, hi)) = self.ray_interval(theta) {
                let mid = 0.5 * (lo + hi);
                let half = 0.5 * (hi - lo);
                for (x, w) in gx.iter().zip(&gw) {
                    let r = mid + half * x;
                    acc += w * half * dth * r * f(r, theta);
                }
            }
        }
        acc
    }

    /// Region-average of `f` (with respect to `r dr dtheta`), or `None` for
    /// an empty region.
    pub fn mean(&self, n_theta: usize, n_r: usize, mut f: impl FnMut(f64, f64) -> f64) -> Option<f64> {
        if self.is_empty() {
            return None;
        }
        let num = self.integrate(n_theta, n_r, &mut f);
        let den = self.integrate(n_theta, n_r, |_, _| 1.0);
        (den > 0.0).then(|| num / den)
    }
}

/// Kinematic momentum bound `|p| <= (a + 1) sqrt(e^2 - 1)`.
#[inline]
pub fn kinematic_p_max(a: f64, e: f64) -> f64 {
    (a + 1.0) * (e * e - 1.0).max(0.0).sqrt()
}

/// Closed-form projection of a nodal grid function in the homogeneous case:
/// the region average of the bilinearly interpolated values.
pub fn project_homogeneous(
    grid: &CrossSectionGrid,
    h: &[f64],
    e: f64,
    p: f64,
) -> Result<Option<f64>> {
    if h.len() != grid.len() {
        return Err(Error::ShapeMismatch { expected: grid.len(), got: h.len() });
    }
    let region = LevelSetRegion::new(grid.frame.a, e, p)?;
    Ok(region.mean(4 * grid.n_theta, 8, |r, th| grid.interp_dirichlet(h, r, th)))
}

// ---------------------------------------------------------------------------
// Projection tables on the invariant lattice
// ---------------------------------------------------------------------------

/// How projection values are produced.
#[derive(Debug, Clone, Copy)]
pub enum ProjectionBackend {
    /// Closed-form region averages; valid only for homogeneous equilibria.
    Homogeneous,
    /// Ergodic averages along reflected characteristics.
    Trajectory { horizon: f64, dt: f64, stride: usize, n_pos: usize },
}

impl ProjectionBackend {
    /// Per-seed orbit horizon; the cell value averages a lattice of such
    /// orbits over the accessible set.
    pub fn default_trajectory() -> Self {
        ProjectionBackend::Trajectory { horizon: 30.0, dt: 5e-3, stride: 2, n_pos: 96 }
    }
}

/// Lattice parameters for [`ProjectionTable`].
#[derive(Debug, Clone, Copy)]
pub struct TableSpec {
    pub n_e: usize,
    pub n_u: usize,
    pub e_max: f64,
    /// padding of the scaled-momentum axis beyond the kinematic bound, to
    /// absorb the potential shift of the invariants
    pub u_pad: f64,
}

impl Default for TableSpec {
    fn default() -> Self {
        Self { n_e: 36, n_u: 37, e_max: 13.0, u_pad: 0.15 }
    }
}

/// Projected hat-basis table: for each cell of an `(e, u)` lattice
/// (`u = p / p_max(e)` is the momentum scaled by its kinematic bound) the
/// rows hold `P(hat_j)` and `P(vhat_phi hat_j)` for every grid basis hat.
pub struct ProjectionTable {
    pub species: Species,
    pub spec: TableSpec,
    e_centers: Vec<f64>,
    u_centers: Vec<f64>,
    /// `C x N` matrices of per-cell averages
    pub avg_hat: DMatrix<f64>,
    pub avg_vphi_hat: DMatrix<f64>,
    pub valid: Vec<bool>,
    /// worst and mean relative disagreement between the two seeds of a cell
    /// (trajectory backend only) — an ergodicity / convergence diagnostic
    pub pair_gap_worst: f64,
    pub pair_gap_mean: f64,
}

struct CellRows {
    hat: Vec<f64>,
    vphi: Vec<f64>,
    valid: bool,
    gap: f64,
}

impl ProjectionTable {
    pub fn cells(&self) -> usize {
        self.spec.n_e * self.spec.n_u
    }

    #[inline]
    fn cell_index(&self, ie: usize, iu: usize) -> usize {
        ie * self.spec.n_u + iu
    }

    /// `(e, u)` coordinates of a cell center (`u` is the scaled momentum).
    pub fn cell_invariants(&self, c: usize) -> (f64, f64) {
        (self.e_centers[c / self.spec.n_u], self.u_centers[c % self.spec.n_u])
    }

    /// Clamped bilinear weights over valid cells for invariants `(e, p)`.
    /// Up to four `(cell, weight)` pairs, weights renormalized to 1.
    pub fn row_weights(&self, a: f64, e: f64, p: f64, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let ne = self.spec.n_e;
        let nu = self.spec.n_u;
        let e_lo = self.e_centers[0];
        let e_hi = self.e_centers[ne - 1];
        let de = (e_hi - e_lo) / (ne - 1).max(1) as f64;
        let u_lo = self.u_centers[0];
        let u_hi = self.u_centers[nu - 1];
        let du = (u_hi - u_lo) / (nu - 1).max(1) as f64;

        let u = p / kinematic_p_max(a, e.max(1.0 + 1e-9)).max(1e-12);
        let xe = ((e - e_lo) / de).clamp(0.0, (ne - 1) as f64 - 1e-9);
        let xu = ((u - u_lo) / du).clamp(0.0, (nu - 1) as f64 - 1e-9);
        let ie = xe.floor() as usize;
        let iu = xu.floor() as usize;
        let (te, tu) = (xe - ie as f64, xu - iu as f64);
        let mut total = 0.0;
        for (di, dj, w) in [
            (0, 0, (1.0 - te) * (1.0 - tu)),
            (1, 0, te * (1.0 - tu)),
            (0, 1, (1.0 - te) * tu),
            (1, 1, te * tu),
        ] {
            let c = self.cell_index((ie + di).min(ne - 1), (iu + dj).min(nu - 1));
            if self.valid[c] && w > 0.0 {
                out.push((c, w));
                total += w;
            }
        }
        if total > 0.0 {
            for (_, w) in out.iter_mut() {
                *w /= total;
            }
        }
    }

    /// `P(h)` at invariants `(e, p)` for the nodal function `h`.
    pub fn eval_hat(&self, a: f64, e: f64, p: f64, h: &[f64]) -> f64 {
        let mut w = Vec::with_capacity(4);
        self.row_weights(a, e, p, &mut w);
        w.iter()
            .map(|&(c, wt)| wt * self.avg_hat.row(c).iter().zip(h).map(|(g, v)| g * v).sum::<f64>())
            .sum()
    }

    /// `P(vhat_phi h)` at invariants `(e, p)`.
    pub fn eval_vphi_hat(&self, a: f64, e: f64, p: f64, h: &[f64]) -> f64 {
        let mut w = Vec::with_capacity(4);
        self.row_weights(a, e, p, &mut w);
        w.iter()
            .map(|&(c, wt)| {
                wt * self.avg_vphi_hat.row(c).iter().zip(h).map(|(g, v)| g * v).sum::<f64>()
            })
            .sum()
    }

    /// Build the table for one species.
    pub fn build(
        eq: &Equilibrium,
        species: Species,
        spec: TableSpec,
        backend: ProjectionBackend,
    ) -> Result<Self> {
        if matches!(backend, ProjectionBackend::Homogeneous) && !eq.is_homogeneous() {
            return Err(Error::Assembly(
                "closed-form projection backend requires a homogeneous equilibrium".into(),
            ));
        }
        let grid = &eq.grid;
        let n = grid.len();
        let ne = spec.n_e;
        // an even midpoint lattice never places a cell at u = 0: seeds with
        // exactly zero toroidal velocity are planar billiards with an extra
        // invariant and do not explore the level-set region
        let nu = spec.n_u + spec.n_u % 2;
        let spec = TableSpec { n_u: nu, ..spec };
        let e_centers: Vec<f64> =
            (0..ne).map(|k| 1.0 + (spec.e_max - 1.0) * (k as f64 + 0.5) / ne as f64).collect();
        let u_span = 1.0 + spec.u_pad;
        let u_centers: Vec<f64> =
            (0..nu).map(|k| -u_span + 2.0 * u_span * (k as f64 + 0.5) / nu as f64).collect();

        let cells: Vec<(usize, usize)> =
            (0..ne).flat_map(|ie| (0..nu).map(move |iu| (ie, iu))).collect();
        let rows: Vec<CellRows> = cells
            .par_iter()
            .map(|&(ie, iu)| {
                let e = e_centers[ie];
                let p = u_centers[iu] * kinematic_p_max(grid.frame.a, e);
                match backend {
                    ProjectionBackend::Homogeneous => homogeneous_cell(grid, n, e, p),
                    ProjectionBackend::Trajectory { horizon, dt, stride, n_pos } => {
                        trajectory_cell(eq, species, e, p, horizon, dt, stride, n_pos)
                    }
                }
            })
            .collect();

        let mut avg_hat = DMatrix::zeros(ne * nu, n);
        let mut avg_vphi_hat = DMatrix::zeros(ne * nu, n);
        let mut valid = vec![false; ne * nu];
        let mut worst = 0.0_f64;
        let mut mean = 0.0_f64;
        let mut counted = 0usize;
        for (c, row) in rows.into_iter().enumerate() {
            valid[c] = row.valid;
            if row.valid {
                for j in 0..n {
                    avg_hat[(c, j)] = row.hat[j];
                    avg_vphi_hat[(c, j)] = row.vphi[j];
                }
                if row.gap.is_finite() {
                    worst = worst.max(row.gap);
                    mean += row.gap;
                    counted += 1;
                }
            }
        }
        Ok(Self {
            species,
            spec,
            e_centers,
            u_centers,
            avg_hat,
            avg_vphi_hat,
            valid,
            pair_gap_worst: worst,
            pair_gap_mean: if counted > 0 { mean / counted as f64 } else { 0.0 },
        })
    }
}

fn homogeneous_cell(grid: &CrossSectionGrid, n: usize, e: f64, p: f64) -> CellRows {
    let mut hat = vec![0.0; n];
    let mut vphi = vec![0.0; n];
    if e <= 1.0 {
        return CellRows { hat, vphi, valid: false, gap: 0.0 };
    }
    let region = match LevelSetRegion::new(grid.frame.a, e, p) {
        Ok(r) if !r.is_empty() => r,
        _ => return CellRows { hat, vphi, valid: false, gap: 0.0 },
    };
    // single pass accumulating the stencil scatter and the region measure
    let mut total = 0.0;
    {
        let dth = std::f64::consts::TAU / (3 * grid.n_theta) as f64;
        let (gx, gw) = gauss_legendre(6);
        for j in 0..3 * grid.n_theta {
            let theta = (j as f64 + 0.5) * dth;
            if let Some((lo, hi)) = region.ray_interval(theta) {
                let mid = 0.5 * (lo + hi);
                let half = 0.5 * (hi - lo);
                for (x, w) in gx.iter().zip(&gw) {
                    let r = mid + half * x;
                    let wt = w * half * dth * r;
                    total += wt;
                    let st = grid.stencil_dirichlet(r, theta);
                    st.scatter(&mut hat, wt);
                    // vhat_phi = p / (R e) at fixed invariants
                    let rr = grid.frame.a + r * theta.cos();
                    st.scatter(&mut vphi, wt * p / (rr * e));
                }
            }
        }
    }
    if total <= 0.0 {
        return CellRows { hat, vphi, valid: false, gap: 0.0 };
    }
    for v in hat.iter_mut().chain(vphi.iter_mut()) {
        *v /= total;
    }
    CellRows { hat, vphi, valid: true, gap: 0.0 }
}

/// Time-average rows for one invariant cell.
///
/// A single orbit can explore its level set very slowly (the free toroidal
/// motion is near-integrable at small toroidal velocity), so the cell value
/// is the average of many short orbit averages seeded across a deterministic
/// lattice of accessible positions and launch angles, weighted with the
/// invariant level-set measure `(e -+ phi) r dr dtheta domega`. Averaging
/// orbit averages against an invariant seed measure converges to the
/// level-set average without any ergodicity assumption; two deliberately
/// long orbits are kept as the ergodicity diagnostic (their time averages
/// should individually approach the same value).
#[allow(clippy::too_many_arguments)]
fn trajectory_cell(
    eq: &Equilibrium,
    species: Species,
    e: f64,
    p: f64,
    horizon: f64,
    dt: f64,
    stride: usize,
    n_pos: usize,
) -> CellRows {
    let grid = &eq.grid;
    let n = grid.len();
    let s = species.sign();
    // accessible grid nodes with their invariant weights
    struct SeedPos {
        node: usize,
        weight: f64,
        vphi: f64,
        vperp: f64,
    }
    let mut accessible = Vec::new();
    for i in 0..grid.n_r {
        for j in 0..grid.n_theta {
            let k = grid.idx(i, j);
            let etil = e - s * eq.phi[k];
            if etil < 1.0 + 1e-12 {
                continue;
            }
            let vphi = p / grid.big_r[k] - s * eq.a_phi[k];
            let vperp2 = etil * etil - 1.0 - vphi * vphi;
            if vperp2 <= 1e-12 {
                continue;
            }
            accessible.push(SeedPos {
                node: k,
                weight: etil * grid.r[i],
                vphi,
                vperp: vperp2.sqrt(),
            });
        }
    }
    let (mut hat, mut vphi_row) = (vec![0.0; n], vec![0.0; n]);
    if accessible.is_empty() {
        return CellRows { hat, vphi: vphi_row, valid: false, gap: 0.0 };
    }
    let opts = IntegrateOptions { dt, ..Default::default() };

    let run = |pos: &SeedPos, omega: f64, t: f64, acc_h: &mut [f64], acc_v: &mut [f64]| -> usize {
        let (i, j) = (pos.node / grid.n_theta, pos.node % grid.n_theta);
        let seed = PhaseState {
            r: grid.r[i],
            theta: grid.theta[j],
            v_r: pos.vperp * omega.cos(),
            v_theta: pos.vperp * omega.sin(),
            v_phi: pos.vphi,
        };
        let mut count = 0usize;
        let mut step = 0usize;
        walk_forward(eq, species, &seed.to_point(), t, &opts, |_, pt| {
            if step % stride == 0 {
                let st = grid.stencil_dirichlet(pt.r(), pt.theta());
                st.scatter(acc_h, 1.0);
                st.scatter(acc_v, pt.v_phi / pt.gamma());
                count += 1;
            }
            step += 1;
        });
        count
    };

    // seed lattice: up to 96 positions (index-strided) with three launch
    // angles each, rotated through a golden-angle sequence so that the
    // angle quadrature decorrelates across positions (the invariant measure
    // is uniform in the launch angle, and fixed-angle slices are not
    // flow-invariant)
    let n_pos = accessible.len().min(n_pos.max(4));
    let stride_pos = accessible.len().div_ceil(n_pos);
    let golden = std::f64::consts::TAU * 0.381_966_011_250_105;
    let mut total_w = 0.0;
    let mut got_any = false;
    for (m, pos) in accessible.iter().step_by(stride_pos).enumerate() {
        let mut loc_h = vec![0.0; n];
        let mut loc_v = vec![0.0; n];
        let mut loc_count = 0usize;
        for q in 0..3 {
            let om = ((3 * m + q) as f64 * golden) % std::f64::consts::TAU;
            loc_count += run(pos, om, horizon, &mut loc_h, &mut loc_v);
        }
        if loc_count == 0 {
            continue;
        }
        got_any = true;
        let w = pos.weight;
        total_w += w;
        let inv = w / loc_count as f64;
        for j in 0..n {
            hat[j] += loc_h[j] * inv;
            vphi_row[j] += loc_v[j] * inv;
        }
    }
    if !got_any || total_w <= 0.0 {
        return CellRows { hat, vphi: vphi_row, valid: false, gap: 0.0 };
    }
    for v in hat.iter_mut().chain(vphi_row.iter_mut()) {
        *v /= total_w;
    }

    // ergodicity diagnostic: two long single orbits vs the ensemble value
    let mut gap = 0.0_f64;
    for (pick, om) in [(0usize, 1.3), (accessible.len() / 2, 3.8)] {
        let pos = &accessible[pick.min(accessible.len() - 1)];
        let mut lh = vec![0.0; n];
        let mut lv = vec![0.0; n];
        let c = run(pos, om, 5.0 * horizon, &mut lh, &mut lv);
        if c == 0 {
            continue;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..n {
            let d = lh[j] / c as f64 - hat[j];
            num += d * d;
            den += hat[j] * hat[j];
        }
        gap = gap.max((num / den.max(1e-300)).sqrt());
    }
    CellRows { hat, vphi: vphi_row, valid: true, gap }
}

// ---------------------------------------------------------------------------
// Projected norms and general sampled projection
// ---------------------------------------------------------------------------

/// `||P(vhat_phi h)||^2` in the weighted phase-space norm, one species.
///
/// Homogeneous equilibria use the closed form
/// `4 pi^2 int |mu_e(e,p)| (p/e)^2 |gbar|^2 m(e,p) e de dp` with `gbar` the
/// region mean of `h / R`; otherwise the trajectory table supplies the
/// projection and the norm is taken by phase-space quadrature.
pub fn projected_vphi_norm(
    eq: &Equilibrium,
    species: Species,
    h: &[f64],
    rule: &crate::geometry::VelocityQuadrature,
    table: Option<&ProjectionTable>,
) -> Result<f64> {
    let grid = &eq.grid;
    if h.len() != grid.len() {
        return Err(Error::ShapeMismatch { expected: grid.len(), got: h.len() });
    }
    if eq.is_homogeneous() {
        let a = grid.frame.a;
        let e_max = (1.0 + rule.v_max * rule.v_max).sqrt();
        let (ex, ew) = gauss_legendre(24);
        let (px, pw) = gauss_legendre(32);
        let mut acc = 0.0;
        for (xe, we) in ex.iter().zip(&ew) {
            let e = 1.0 + 0.5 * (e_max - 1.0) * (xe + 1.0);
            let je = 0.5 * (e_max - 1.0) * we;
            let p_max = kinematic_p_max(a, e);
            for (xp, wp) in px.iter().zip(&pw) {
                let p = p_max * xp;
                let jp = p_max * wp;
                let region = LevelSetRegion::new(a, e, p)?;
                if region.is_empty() {
                    continue;
                }
                let m = region.integrate(96, 6, |_, _| 1.0);
                if m <= 0.0 {
                    continue;
                }
                let gbar = region.integrate(96, 6, |r, th| {
                    grid.interp_dirichlet(h, r, th) / (a + r * th.cos())
                }) / m;
                let (_, de, _) = eq.profile.eval_all(species, e, p);
                acc += je * jp * de.abs() * (p / e) * (p / e) * gbar * gbar * m * e;
            }
        }
        return Ok(4.0 * std::f64::consts::PI.powi(2) * acc);
    }
    let table = table.ok_or_else(|| {
        Error::Assembly("inhomogeneous projected norm needs a trajectory table".into())
    })?;
    // ||P g||^2 = <P g, g> by idempotence and self-adjointness
    let a = grid.frame.a;
    let mut acc = 0.0;
    for k in 0..grid.len() {
        let rr = grid.big_r[k];
        for (v, w) in rule.nodes.iter().zip(&rule.weights) {
            let gamma = (1.0 + v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let s = species.sign();
            let e = gamma + s * eq.phi[k];
            let p = rr * (v[2] + s * eq.a_phi[k]);
            let (_, mu_e, _) = eq.profile.eval_all(species, e, p);
            let pg = table.eval_vphi_hat(a, e, p, h);
            acc += grid.w[k] * w * mu_e.abs() * pg * (v[2] / gamma) * h[k];
        }
    }
    Ok(acc)
}

/// Per-node sampled projection with convergence diagnostics.
pub struct SampledProjection {
    pub values: Vec<f64>,
    /// halving gap of the ergodic average at each node
    pub diagnostics: Vec<f64>,
    /// fraction of nodes whose diagnostic exceeded the tolerance
    pub warn_fraction: f64,
}

/// Evaluate `P g` at the given phase nodes by long-time averaging.
pub fn project_general(
    eq: &Equilibrium,
    species: Species,
    nodes: &[PhaseState],
    horizon: f64,
    opts: &IntegrateOptions,
    diag_tol: f64,
    g: impl Fn(&PhasePoint) -> f64 + Sync,
) -> Result<SampledProjection> {
    let results: Vec<(f64, f64)> = nodes
        .par_iter()
        .map(|seed| {
            crate::trajectories::ergodic_average(eq, species, seed, horizon, opts, |p| g(p))
                .unwrap_or((f64::NAN, f64::INFINITY))
        })
        .collect();
    let mut warn = 0usize;
    let mut values = Vec::with_capacity(nodes.len());
    let mut diags = Vec::with_capacity(nodes.len());
    for (v, d) in results {
        if !d.is_finite() || d > diag_tol {
            warn += 1;
        }
        values.push(v);
        diags.push(d);
    }
    Ok(SampledProjection {
        values,
        diagnostics: diags,
        warn_fraction: warn as f64 / nodes.len().max(1) as f64,
    })
}
