//! Equilibrium construction: the elliptic system for the potentials is
//! solved by Picard iteration (the contraction the existence proof uses),
//! and the solved potentials get a smooth Fourier-by-spline representation
//! whose analytic derivatives feed the trajectory integrator.
//!
//! The system, with homogeneous Dirichlet data at the wall:
//!
//! ```text
//! -Delta phi0             = F1 = int (mu+ - mu-) dv
//! (-Delta + 1/R^2) A_phi0 = F2 = int vhat_phi (mu+ - mu-) dv
//! ```
//!
//! evaluated at the invariants `e± = <v> ± phi0`, `p± = R (v_phi ± A_phi0)`,
//! `R = a + r cos(theta)`.

use crate::geometry::{
    assemble_scalar_laplacian, nodal_gradient, weighted_norm, CrossSectionGrid,
    VelocityQuadrature, WSolver, WallClosure,
};
use crate::profiles::{MuProfile, Species};
use crate::{Error, Result};
use nalgebra::DVector;
use serde::Serialize;

// ---------------------------------------------------------------------------
// Cubic spline (value + first derivative)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
enum EndCondition {
    Natural,
    ClampedDeriv(f64),
}

#[derive(Debug, Clone)]
struct CubicSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    y2: Vec<f64>,
}

impl CubicSpline {
    fn new(x: Vec<f64>, y: Vec<f64>, left: EndCondition, right: EndCondition) -> Self {
        let n = x.len();
        assert!(n >= 3);
        let mut u = vec![0.0; n];
        let mut y2 = vec![0.0; n];
        match left {
            EndCondition::Natural => {
                y2[0] = 0.0;
                u[0] = 0.0;
            }
            EndCondition::ClampedDeriv(d) => {
                y2[0] = -0.5;
                u[0] = (3.0 / (x[1] - x[0])) * ((y[1] - y[0]) / (x[1] - x[0]) - d);
            }
        }
        for i in 1..n - 1 {
            let sig = (x[i] - x[i - 1]) / (x[i + 1] - x[i - 1]);
            let p = sig * y2[i - 1] + 2.0;
            y2[i] = (sig - 1.0) / p;
            let dy =
                (y[i + 1] - y[i]) / (x[i + 1] - x[i]) - (y[i] - y[i - 1]) / (x[i] - x[i - 1]);
            u[i] = (6.0 * dy / (x[i + 1] - x[i - 1]) - sig * u[i - 1]) / p;
        }
        let (qn, un) = match right {
            EndCondition::Natural => (0.0, 0.0),
            EndCondition::ClampedDeriv(d) => (
                0.5,
                (3.0 / (x[n - 1] - x[n - 2]))
                    * (d - (y[n - 1] - y[n - 2]) / (x[n - 1] - x[n - 2])),
            ),
        };
        y2[n - 1] = (un - qn * u[n - 2]) / (qn * y2[n - 2] + 1.0);
        for i in (0..n - 1).rev() {
            y2[i] = y2[i] * y2[i + 1] + u[i];
        }
        Self { x, y, y2 }
    }

    /// Interval index for `t` (knots are near-uniform: scaled guess + fixup).
    #[inline]
    fn locate(&self, t: f64) -> usize {
        let n = self.x.len();
        let mut k = (((t - self.x[0]) / (self.x[n - 1] - self.x[0])) * (n - 1) as f64) as usize;
        k = k.min(n - 2);
        while k > 0 && t < self.x[k] {
            k -= 1;
        }
        while k < n - 2 && t > self.x[k + 1] {
            k += 1;
        }
        k
    }

    /// `(value, derivative)` at `t`, clamped to the knot range.
    #[inline]
    fn eval(&self, t: f64) -> (f64, f64) {
        let t = t.clamp(self.x[0], self.x[self.x.len() - 1]);
        self.eval_in(self.locate(t), t)
    }

    /// Evaluation within a known interval.
    #[inline]
    fn eval_in(&self, k: usize, t: f64) -> (f64, f64) {
        let h = self.x[k + 1] - self.x[k];
        let a = (self.x[k + 1] - t) / h;
        let b = (t - self.x[k]) / h;
        let val = a * self.y[k]
            + b * self.y[k + 1]
            + ((a * a * a - a) * self.y2[k] + (b * b * b - b) * self.y2[k + 1]) * h * h / 6.0;
        let der = (self.y[k + 1] - self.y[k]) / h
            + ((3.0 * b * b - 1.0) * self.y2[k + 1] - (3.0 * a * a - 1.0) * self.y2[k]) * h / 6.0;
        (val, der)
    }
}

// ---------------------------------------------------------------------------
// Smooth scalar field on the cross-section disk
// ---------------------------------------------------------------------------

/// Fourier (in theta) by cubic-spline (in r) representation of a scalar field
/// on the unit disk, with analytic first derivatives.
///
/// Fields with homogeneous Dirichlet data carry an extra knot pinned to zero
/// at the wall. Angular modes vanish at the axis; the mean mode is clamped to
/// zero slope there, which keeps the gradient bounded across the center.
#[derive(Debug, Clone)]
pub struct DiskField {
    m_max: usize,
    cos_modes: Vec<CubicSpline>,
    sin_modes: Vec<CubicSpline>,
    zero: bool,
}

impl DiskField {
    pub fn zero() -> Self {
        Self { m_max: 0, cos_modes: Vec::new(), sin_modes: Vec::new(), zero: true }
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    /// Fit nodal values on the grid; `dirichlet` pins the field to zero at
    /// the wall. Angular modes with negligible content are dropped, which
    /// keeps evaluation cheap for the near-axisymmetric equilibria.
    pub fn fit(grid: &CrossSectionGrid, values: &[f64], dirichlet: bool) -> Self {
        let nt = grid.n_theta;
        let m_max = (nt / 2).saturating_sub(1).min(12);
        let mut knots = Vec::with_capacity(grid.n_r + 2);
        knots.push(0.0);
        knots.extend_from_slice(&grid.r);
        knots.push(1.0);
        let nk = knots.len();

        let mut cos_modes = Vec::with_capacity(m_max + 1);
        let mut sin_modes = Vec::with_capacity(m_max + 1);
        for m in 0..=m_max {
            let mut ac = vec![0.0; nk];
            let mut as_ = vec![0.0; nk];
            for i in 0..grid.n_r {
                let mut sc = 0.0;
                let mut ss = 0.0;
                for j in 0..nt {
                    let v = values[grid.idx(i, j)];
                    let ang = m as f64 * grid.theta[j];
                    sc += v * ang.cos();
                    ss += v * ang.sin();
                }
                let norm = if m == 0 { 1.0 } else { 2.0 };
                ac[i + 1] = norm * sc / nt as f64;
                as_[i + 1] = norm * ss / nt as f64;
            }
            if m == 0 {
                // center value: quadratic through the first three rings at r = 0
                let (r0, r1, r2) = (grid.r[0], grid.r[1], grid.r[2]);
                let (f0, f1, f2) = (ac[1], ac[2], ac[3]);
                let l0 = (0.0 - r1) * (0.0 - r2) / ((r0 - r1) * (r0 - r2));
                let l1 = (0.0 - r0) * (0.0 - r2) / ((r1 - r0) * (r1 - r2));
                let l2 = (0.0 - r0) * (0.0 - r1) / ((r2 - r0) * (r2 - r1));
                ac[0] = l0 * f0 + l1 * f1 + l2 * f2;
            }
            if !dirichlet {
                ac[nk - 1] = 1.5 * ac[nk - 2] - 0.5 * ac[nk - 3];
                as_[nk - 1] = 1.5 * as_[nk - 2] - 0.5 * as_[nk - 3];
            }
            let left =
                if m == 0 { EndCondition::ClampedDeriv(0.0) } else { EndCondition::Natural };
            cos_modes.push(CubicSpline::new(knots.clone(), ac, left, EndCondition::Natural));
            sin_modes.push(CubicSpline::new(knots.clone(), as_, left, EndCondition::Natural));
        }
        // truncate trailing negligible modes
        let scale = cos_modes
            .iter()
            .chain(&sin_modes)
            .flat_map(|s| s.y.iter())
            .fold(0.0_f64, |m, &v| m.max(v.abs()));
        let mut keep = 0;
        for m in 0..=m_max {
            let amp = cos_modes[m]
                .y
                .iter()
                .chain(sin_modes[m].y.iter())
                .fold(0.0_f64, |mx, &v| mx.max(v.abs()));
            if amp > 1e-6 * scale.max(1e-300) {
                keep = m;
            }
        }
        cos_modes.truncate(keep + 1);
        sin_modes.truncate(keep + 1);
        Self { m_max: keep, cos_modes, sin_modes, zero: false }
    }

    /// `(f, d_r f, (1/r) d_theta f)` at `(r, theta)`.
    #[inline]
    pub fn eval(&self, r: f64, theta: f64) -> (f64, f64, f64) {
        if self.zero {
            return (0.0, 0.0, 0.0);
        }
        let r_safe = r.max(1e-12);
        let rc = r.clamp(0.0, 1.0);
        let k = self.cos_modes[0].locate(rc);
        let (st, ct) = theta.sin_cos();
        let mut cos_m = 1.0;
        let mut sin_m = 0.0;
        let (mut f, mut fr, mut ft) = (0.0, 0.0, 0.0);
        for m in 0..=self.m_max {
            let (a, da) = self.cos_modes[m].eval_in(k, rc);
            let (b, db) = self.sin_modes[m].eval_in(k, rc);
            f += a * cos_m + b * sin_m;
            fr += da * cos_m + db * sin_m;
            ft += (m as f64) * (-a * sin_m + b * cos_m);
            let c_next = cos_m * ct - sin_m * st;
            sin_m = sin_m * ct + cos_m * st;
            cos_m = c_next;
        }
        (f, fr, ft / r_safe)
    }

    #[inline]
    pub fn value(&self, r: f64, theta: f64) -> f64 {
        self.eval(r, theta).0
    }
}

// ---------------------------------------------------------------------------
// Equilibrium
// ---------------------------------------------------------------------------

/// Equilibrium field sample in cylindrical components at a cross-section
/// point; the toroidal magnetic component vanishes for these equilibria.
#[derive(Debug, Clone, Copy, Default)]
pub struct FieldSample {
    pub e_big_r: f64,
    pub e_z: f64,
    pub b_big_r: f64,
    pub b_z: f64,
}

/// Residual and iteration diagnostics of the Picard solve.
#[derive(Debug, Clone, Serialize)]
pub struct PicardDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    /// successive sup-norm increments
    pub increments: Vec<f64>,
    /// measured contraction ratio (last increment quotient)
    pub contraction_ratio: f64,
    /// w-norm residuals of the two elliptic equations, relative to the source
    pub residual_phi: f64,
    pub residual_a: f64,
    pub sup_phi: f64,
    pub sup_a: f64,
}

/// A solved (or prescribed) equilibrium.
#[derive(Clone)]
pub struct Equilibrium {
    pub grid: CrossSectionGrid,
    pub profile: MuProfile,
    /// electric potential at the nodes
    pub phi: Vec<f64>,
    /// toroidal magnetic potential at the nodes
    pub a_phi: Vec<f64>,
    /// nodal field components in the `(e_r, e_theta)` basis
    pub e_r: Vec<f64>,
    pub e_theta: Vec<f64>,
    pub b_r: Vec<f64>,
    pub b_theta: Vec<f64>,
    /// smooth representations driving trajectories
    pub phi_smooth: DiskField,
    pub a_smooth: DiskField,
    pub diagnostics: PicardDiagnostics,
}

/// Options for the Picard solve.
#[derive(Debug, Clone)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// keep `phi = 0` and solve only the magnetic potential (requires the
    /// reflection-symmetric profile pair)
    pub purely_magnetic: bool,
    /// under-relaxation in `(0, 1]`
    pub damping: f64,
    /// optional seed for the iteration (defaults to zero fields)
    pub initial_phi: Option<Vec<f64>>,
    pub initial_a: Option<Vec<f64>>,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 60,
            purely_magnetic: false,
            damping: 1.0,
            initial_phi: None,
            initial_a: None,
        }
    }
}

/// Relative truncation-tail estimate of the profile's velocity integrals at
/// the cutoff `v_max`: the worst-case envelope `max_p (|mu| + |mu_p| +
/// |mu_e|)` over reachable momenta is integrated radially on both sides of
/// the cutoff (with slack for the potential shift of the energy invariant).
pub fn profile_tail_fraction(profile: &MuProfile, a: f64, v_max: f64) -> f64 {
    let envelope = |s: f64| -> f64 {
        let e = (1.0 + s * s).sqrt() - 0.6; // conservative potential shift
        let p_max = (a + 1.0) * s;
        let mut worst = 0.0_f64;
        for k in 0..9 {
            let p = p_max * (k as f64) / 8.0;
            for sp in Species::BOTH {
                let (v, de, dp) = profile.eval_all(sp, e.max(0.4), p);
                worst = worst.max(v.abs() + de.abs() + dp.abs());
            }
        }
        s * s * worst
    };
    let quad = |lo: f64, hi: f64| -> f64 {
        let n = 160;
        let h = (hi - lo) / n as f64;
        (0..n).map(|k| envelope(lo + (k as f64 + 0.5) * h)).sum::<f64>() * h
    };
    let body = quad(0.0, v_max);
    let tail = quad(v_max, 5.0 * v_max + 40.0);
    tail / (body + tail).max(1e-300)
}

/// Charge and toroidal-current sources `(F1, F2)` for given nodal potentials.
pub fn source_integrals(
    grid: &CrossSectionGrid,
    profile: &MuProfile,
    rule: &VelocityQuadrature,
    phi: &[f64],
    a_phi: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if phi.len() != grid.len() || a_phi.len() != grid.len() {
        return Err(Error::ShapeMismatch { expected: grid.len(), got: phi.len() });
    }
    let sup_phi = phi.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    if sup_phi > 0.5 {
        return Err(Error::EquilibriumSolve(format!(
            "potential left the contraction ball: sup|phi| = {sup_phi} > 1/2"
        )));
    }
    let tail = profile_tail_fraction(profile, grid.frame.a, rule.v_max);
    if tail > 0.05 {
        return Err(Error::EquilibriumSolve(format!(
            "velocity cutoff too small: relative tail estimate {tail:.3e}"
        )));
    }
    let mut f1 = vec![0.0; grid.len()];
    let mut f2 = vec![0.0; grid.len()];
    for k in 0..grid.len() {
        let rr = grid.big_r[k];
        let (mut s1, mut s2) = (0.0, 0.0);
        for (v, w) in rule.nodes.iter().zip(&rule.weights) {
            let gamma_v = (1.0 + v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let (mu_p, _, _) =
                profile.eval_all(Species::Ion, gamma_v + phi[k], rr * (v[2] + a_phi[k]));
            let (mu_m, _, _) =
                profile.eval_all(Species::Electron, gamma_v - phi[k], rr * (v[2] - a_phi[k]));
            let diff = mu_p - mu_m;
            s1 += w * diff;
            s2 += w * (v[2] / gamma_v) * diff;
        }
        f1[k] = s1;
        f2[k] = s2;
    }
    Ok((f1, f2))
}

/// Solve the equilibrium system by Picard iteration.
pub fn solve_picard(
    grid: &CrossSectionGrid,
    profile: &MuProfile,
    rule: &VelocityQuadrature,
    opts: &PicardOptions,
) -> Result<Equilibrium> {
    if opts.purely_magnetic {
        let rep = profile.validate_hypotheses(grid.frame.a);
        if !rep.symmetry_5_8_ok {
            return Err(Error::EquilibriumSolve(
                "purely magnetic mode requires the reflection-symmetric profile pair".into(),
            ));
        }
    }
    let n = grid.len();
    let lap = assemble_scalar_laplacian(grid, false)?;
    let lap_shift = assemble_scalar_laplacian(grid, true)?;
    let solve_phi = WSolver::new(&(-&lap), grid, 1)?;
    let solve_a = WSolver::new(&(-&lap_shift), grid, 1)?;

    let mut phi = opts.initial_phi.clone().unwrap_or_else(|| vec![0.0; n]);
    let mut a_phi = opts.initial_a.clone().unwrap_or_else(|| vec![0.0; n]);
    if opts.purely_magnetic {
        phi.iter_mut().for_each(|v| *v = 0.0);
    }

    let mut increments = Vec::new();
    let mut converged = false;
    for _ in 0..opts.max_iter {
        let (f1, f2) = source_integrals(grid, profile, rule, &phi, &a_phi)?;
        let mut phi_next = if opts.purely_magnetic {
            vec![0.0; n]
        } else {
            solve_phi.solve(&DVector::from_column_slice(&f1)).as_slice().to_vec()
        };
        let mut a_next = solve_a.solve(&DVector::from_column_slice(&f2)).as_slice().to_vec();
        if opts.damping < 1.0 {
            for k in 0..n {
                phi_next[k] = opts.damping * phi_next[k] + (1.0 - opts.damping) * phi[k];
                a_next[k] = opts.damping * a_next[k] + (1.0 - opts.damping) * a_phi[k];
            }
        }
        let inc = phi_next
            .iter()
            .zip(&phi)
            .chain(a_next.iter().zip(&a_phi))
            .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
        increments.push(inc);
        phi = phi_next;
        a_phi = a_next;
        if inc < opts.tol {
            converged = true;
            break;
        }
    }
    let sup_phi = phi.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    let contraction_ratio = {
        let mut ratio = 0.0;
        for k in (1..increments.len()).rev() {
            if increments[k - 1] > 1e-300 && increments[k] > 0.0 {
                ratio = increments[k] / increments[k - 1];
                break;
            }
        }
        ratio
    };

    // final residuals against a fresh source evaluation
    let (f1, f2) = source_integrals(grid, profile, rule, &phi, &a_phi)?;
    let phi_v = DVector::from_column_slice(&phi);
    let a_v = DVector::from_column_slice(&a_phi);
    let res1 = &lap * &phi_v + DVector::from_column_slice(&f1);
    let res2 = &lap_shift * &a_v + DVector::from_column_slice(&f2);
    let scale1 = weighted_norm(&f1, grid).max(1e-300);
    let scale2 = weighted_norm(&f2, grid).max(1e-300);
    let diagnostics = PicardDiagnostics {
        converged,
        iterations: increments.len(),
        contraction_ratio,
        residual_phi: weighted_norm(res1.as_slice(), grid) / scale1,
        residual_a: weighted_norm(res2.as_slice(), grid) / scale2,
        sup_phi,
        sup_a: a_phi.iter().fold(0.0_f64, |m, &v| m.max(v.abs())),
        increments,
    };
    if sup_phi > 0.5 {
        return Err(Error::EquilibriumSolve(format!(
            "iteration left the contraction ball: sup|phi| = {sup_phi}"
        )));
    }

    let mut eq = Equilibrium {
        grid: grid.clone(),
        profile: *profile,
        phi,
        a_phi,
        e_r: vec![0.0; n],
        e_theta: vec![0.0; n],
        b_r: vec![0.0; n],
        b_theta: vec![0.0; n],
        phi_smooth: DiskField::zero(),
        a_smooth: DiskField::zero(),
        diagnostics,
    };
    eq.rebuild_derived();
    if !eq.diagnostics.converged {
        return Err(Error::EquilibriumSolve(format!(
            "Picard iteration did not converge in {} steps (last increment {:.3e})",
            eq.diagnostics.iterations,
            eq.diagnostics.increments.last().copied().unwrap_or(f64::NAN),
        )));
    }
    Ok(eq)
}

impl Equilibrium {
    /// Vacuum equilibrium (zero fields) on the given grid.
    pub fn vacuum(grid: &CrossSectionGrid, profile: MuProfile) -> Self {
        let n = grid.len();
        Self {
            grid: grid.clone(),
            profile,
            phi: vec![0.0; n],
            a_phi: vec![0.0; n],
            e_r: vec![0.0; n],
            e_theta: vec![0.0; n],
            b_r: vec![0.0; n],
            b_theta: vec![0.0; n],
            phi_smooth: DiskField::zero(),
            a_smooth: DiskField::zero(),
            diagnostics: PicardDiagnostics {
                converged: true,
                iterations: 0,
                increments: Vec::new(),
                contraction_ratio: 0.0,
                residual_phi: 0.0,
                residual_a: 0.0,
                sup_phi: 0.0,
                sup_a: 0.0,
            },
        }
    }

    /// Equilibrium with prescribed nodal potentials (no self-consistency
    /// claim); used by tests and frozen-field studies.
    pub fn from_potentials(
        grid: &CrossSectionGrid,
        profile: MuProfile,
        phi: Vec<f64>,
        a_phi: Vec<f64>,
    ) -> Result<Self> {
        if phi.len() != grid.len() || a_phi.len() != grid.len() {
            return Err(Error::ShapeMismatch { expected: grid.len(), got: phi.len() });
        }
        let mut eq = Equilibrium::vacuum(grid, profile);
        eq.phi = phi;
        eq.a_phi = a_phi;
        eq.rebuild_derived();
        Ok(eq)
    }

    pub fn is_homogeneous(&self) -> bool {
        self.phi_smooth.is_zero() && self.a_smooth.is_zero()
    }

    /// Rebuild smooth representations and nodal field components from the
    /// nodal potentials.
    pub fn rebuild_derived(&mut self) {
        let grid = &self.grid;
        let sup_phi = self.phi.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
        let sup_a = self.a_phi.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
        self.phi_smooth =
            if sup_phi == 0.0 { DiskField::zero() } else { DiskField::fit(grid, &self.phi, true) };
        self.a_smooth =
            if sup_a == 0.0 { DiskField::zero() } else { DiskField::fit(grid, &self.a_phi, true) };

        // nodal fields from discrete derivatives of the nodal potentials
        let (phi_r, phi_t) = nodal_gradient(grid, &self.phi, WallClosure::Dirichlet);
        // B needs derivatives of R * A_phi
        let ra: Vec<f64> = self.a_phi.iter().zip(&grid.big_r).map(|(a, r)| a * r).collect();
        let (ra_r, ra_t) = nodal_gradient(grid, &ra, WallClosure::Neumann);
        for k in 0..grid.len() {
            self.e_r[k] = -phi_r[k];
            self.e_theta[k] = -phi_t[k];
            let rr = grid.big_r[k];
            self.b_r[k] = -ra_t[k] / rr;
            self.b_theta[k] = ra_r[k] / rr;
        }
    }

    /// Field sample (cylindrical components) at the cross-section point
    /// `(y1, y2) = (r cos theta, r sin theta)`.
    #[inline]
    pub fn fields_at(&self, y1: f64, y2: f64) -> FieldSample {
        if self.phi_smooth.is_zero() && self.a_smooth.is_zero() {
            return FieldSample::default();
        }
        let r = (y1 * y1 + y2 * y2).sqrt();
        let theta = y2.atan2(y1);
        let (st, ct) = theta.sin_cos();
        let rr = self.grid.frame.a + y1;
        let mut out = FieldSample::default();
        if !self.phi_smooth.is_zero() {
            let (_, fr, ft) = self.phi_smooth.eval(r, theta);
            // E = -grad(phi); convert (d_r, (1/r) d_theta) to (d_R, d_z)
            out.e_big_r = -(ct * fr - st * ft);
            out.e_z = -(st * fr + ct * ft);
        }
        if !self.a_smooth.is_zero() {
            let (av, ar, at) = self.a_smooth.eval(r, theta);
            let d_big_r = ct * ar - st * at;
            let dz = st * ar + ct * at;
            out.b_big_r = -dz;
            out.b_z = d_big_r + av / rr;
        }
        out
    }

    /// Potentials at a cross-section point, from the smooth representation.
    #[inline]
    pub fn potentials_at(&self, r: f64, theta: f64) -> (f64, f64) {
        (self.phi_smooth.value(r, theta), self.a_smooth.value(r, theta))
    }

    /// Particle invariants `(e+, p+, e-, p-)` of a phase point.
    pub fn invariants_at(
        &self,
        state: &crate::trajectories::PhaseState,
    ) -> Result<(f64, f64, f64, f64)> {
        if state.r > 1.0 + 1e-12 || state.r < 0.0 {
            return Err(Error::OutsideDomain(state.r));
        }
        let (phi, a) = self.potentials_at(state.r, state.theta);
        let gamma_v = (1.0
            + state.v_r * state.v_r
            + state.v_theta * state.v_theta
            + state.v_phi * state.v_phi)
            .sqrt();
        let rr = self.grid.frame.a + state.r * state.theta.cos();
        Ok((gamma_v + phi, rr * (state.v_phi + a), gamma_v - phi, rr * (state.v_phi - a)))
    }

    /// Invariants for one species at `(r, theta, v)`.
    #[inline]
    pub fn invariants_for(&self, species: Species, r: f64, theta: f64, v: &[f64; 3]) -> (f64, f64) {
        let (phi, a) = self.potentials_at(r, theta);
        let gamma_v = (1.0 + v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        let rr = self.grid.frame.a + r * theta.cos();
        let s = species.sign();
        (gamma_v + s * phi, rr * (v[2] + s * a))
    }

    /// JSON residual summary.
    pub fn residual_summary(&self) -> serde_json::Value {
        serde_json::json!({
            "converged": self.diagnostics.converged,
            "iterations": self.diagnostics.iterations,
            "contraction_ratio": self.diagnostics.contraction_ratio,
            "residual_phi": self.diagnostics.residual_phi,
            "residual_a_phi": self.diagnostics.residual_a,
            "sup_phi": self.diagnostics.sup_phi,
            "sup_a_phi": self.diagnostics.sup_a,
        })
    }

    /// CSV dump: `r, theta, phi, a_phi, e_r, e_theta, b_r, b_theta`.
    pub fn write_csv(&self, mut w: impl std::io::Write) -> Result<()> {
        writeln!(w, "r,theta,phi,a_phi,e_r,e_theta,b_r,b_theta")?;
        for i in 0..self.grid.n_r {
            for j in 0..self.grid.n_theta {
                let k = self.grid.idx(i, j);
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{}",
                    self.grid.r[i],
                    self.grid.theta[j],
                    self.phi[k],
                    self.a_phi[k],
                    self.e_r[k],
                    self.e_theta[k],
                    self.b_r[k],
                    self.b_theta[k]
                )?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ToroidalFrame;
    use crate::profiles::ProfileFamily;

    fn grid(a: f64, nr: usize, nt: usize) -> CrossSectionGrid {
        CrossSectionGrid::new(ToroidalFrame::new(a).unwrap(), nr, nt).unwrap()
    }

    fn rule() -> VelocityQuadrature {
        VelocityQuadrature::polar_reduced(12.0, 4, 4).unwrap()
    }

    #[test]
    fn vacuum_profile_converges_immediately_to_zero() {
        let g = grid(2.0, 8, 16);
        let prof = MuProfile::with_default_decay(ProfileFamily::Vacuum, 2.0).unwrap();
        let eq = solve_picard(&g, &prof, &rule(), &PicardOptions::default()).unwrap();
        assert!(eq.diagnostics.converged);
        assert!(eq.diagnostics.iterations <= 1);
        assert!(eq.phi.iter().all(|&v| v == 0.0));
        assert!(eq.a_phi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn contraction_ratio_scales_with_amplitude() {
        let g = grid(2.0, 10, 20);
        // seed the iteration away from the fixed point so the decay rate of
        // the increments measures the contraction factor
        let seed: Vec<f64> = (0..g.len())
            .map(|k| {
                let (i, j) = (k / g.n_theta, k % g.n_theta);
                0.05 * (1.0 - g.r[i] * g.r[i]) * (1.0 + 0.3 * g.theta[j].cos())
            })
            .collect();
        let mut ratios = Vec::new();
        for c in [0.02, 0.04] {
            let prof =
                MuProfile::with_default_decay(ProfileFamily::StableEven { amplitude: c }, 2.0)
                    .unwrap();
            let opts = PicardOptions {
                initial_phi: Some(seed.clone()),
                initial_a: Some(seed.clone()),
                ..Default::default()
            };
            let eq = solve_picard(&g, &prof, &rule(), &opts).unwrap();
            assert!(eq.diagnostics.converged);
            assert!(eq.diagnostics.contraction_ratio < 1.0);
            ratios.push(eq.diagnostics.contraction_ratio);
        }
        let q = ratios[1] / ratios[0].max(1e-300);
        assert!(
            (1.4..2.8).contains(&q),
            "contraction should scale about linearly with amplitude, got {ratios:?}"
        );
    }

    #[test]
    fn purely_magnetic_run_keeps_phi_zero_and_finds_nontrivial_field() {
        let g = grid(2.0, 10, 20);
        let prof = MuProfile::with_default_decay(
            ProfileFamily::Instability { amplitude: 0.002, beta: 1.0, delta: 0.5 },
            2.0,
        )
        .unwrap();
        // the toroidal current at zero potentials must not vanish
        let zeros = vec![0.0; g.len()];
        let (f1, f2) = source_integrals(&g, &prof, &rule(), &zeros, &zeros).unwrap();
        let f1_norm = weighted_norm(&f1, &g);
        let f2_norm = weighted_norm(&f2, &g);
        assert!(f1_norm < 1e-12, "charge source should vanish, got {f1_norm}");
        assert!(f2_norm > 1e-6, "current source should not vanish, got {f2_norm}");

        let opts = PicardOptions { purely_magnetic: true, ..Default::default() };
        let eq = solve_picard(&g, &prof, &rule(), &opts).unwrap();
        assert!(eq.diagnostics.converged);
        assert!(eq.phi.iter().all(|&v| v == 0.0));
        assert!(eq.diagnostics.sup_a > 1e-6, "sup A = {}", eq.diagnostics.sup_a);
        assert!(eq.diagnostics.residual_a < 1e-6, "residual {}", eq.diagnostics.residual_a);
    }

    #[test]
    fn symmetric_source_structure_doubles_single_species_current() {
        // For an even pair at zero potentials the two species contribute the
        // same toroidal current with opposite momentum reflection, so the
        // difference doubles the single-species value.
        let g = grid(2.0, 6, 12);
        let prof = MuProfile::with_default_decay(
            ProfileFamily::Instability { amplitude: 0.002, beta: 1.0, delta: 0.5 },
            2.0,
        )
        .unwrap();
        let r = rule();
        let k = g.idx(3, 5);
        let rr = g.big_r[k];
        let single: f64 = r
            .nodes
            .iter()
            .zip(&r.weights)
            .map(|(v, w)| {
                let gv = (1.0 + v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                let (m, _, _) = prof.eval_all(Species::Ion, gv, rr * v[2]);
                w * (v[2] / gv) * m
            })
            .sum();
        let zeros = vec![0.0; g.len()];
        let (_, f2) = source_integrals(&g, &prof, &rule(), &zeros, &zeros).unwrap();
        assert!((f2[k] - 2.0 * single).abs() < 1e-12 * single.abs().max(1e-12));
    }

    #[test]
    fn invariants_reduce_to_kinematics_in_vacuum() {
        let g = grid(2.0, 8, 16);
        let prof = MuProfile::with_default_decay(ProfileFamily::Vacuum, 2.0).unwrap();
        let eq = Equilibrium::vacuum(&g, prof);
        let st = crate::trajectories::PhaseState {
            r: 0.5,
            theta: 1.0,
            v_r: 0.3,
            v_theta: -0.2,
            v_phi: 0.7,
        };
        let (ep, pp, em, pm) = eq.invariants_at(&st).unwrap();
        let gamma_v = (1.0f64 + 0.09 + 0.04 + 0.49).sqrt();
        let rr = 2.0 + 0.5 * 1.0f64.cos();
        assert!((ep - gamma_v).abs() < 1e-14);
        assert!((em - gamma_v).abs() < 1e-14);
        assert!((pp - rr * 0.7).abs() < 1e-14);
        assert!((pm - rr * 0.7).abs() < 1e-14);
        // v = 0 gives e = 1 (plus the potential, zero here)
        let rest = crate::trajectories::PhaseState {
            r: 0.2,
            theta: 0.0,
            v_r: 0.0,
            v_theta: 0.0,
            v_phi: 0.0,
        };
        let (e1, _, e2, _) = eq.invariants_at(&rest).unwrap();
        assert_eq!(e1, 1.0);
        assert_eq!(e2, 1.0);
        let out = crate::trajectories::PhaseState {
            r: 1.2,
            theta: 0.0,
            v_r: 0.0,
            v_theta: 0.0,
            v_phi: 0.0,
        };
        assert!(eq.invariants_at(&out).is_err());
    }

    #[test]
    fn zero_potential_gives_zero_fields() {
        let g = grid(2.0, 8, 16);
        let prof = MuProfile::with_default_decay(ProfileFamily::Vacuum, 2.0).unwrap();
        let eq = Equilibrium::vacuum(&g, prof);
        let s = eq.fields_at(0.3, -0.2);
        assert_eq!(s.e_big_r, 0.0);
        assert_eq!(s.b_z, 0.0);
    }

    #[test]
    fn boundary_family_constant_over_big_r_has_no_field() {
        // A_phi = c / R makes R A_phi constant, so B vanishes identically
        let g = grid(2.0, 24, 48);
        let prof = MuProfile::with_default_decay(ProfileFamily::Vacuum, 2.0).unwrap();
        let a: Vec<f64> = g.big_r.iter().map(|rr| 0.3 / rr).collect();
        let mut eq = Equilibrium::vacuum(&g, prof);
        eq.a_phi = a;
        // this family is not Dirichlet at the wall
        eq.a_smooth = DiskField::fit(&g, &eq.a_phi, false);
        for &(y1, y2) in &[(0.2, 0.1), (-0.4, 0.3), (0.0, -0.6)] {
            let s = eq.fields_at(y1, y2);
            let b_mag = (s.b_big_r * s.b_big_r + s.b_z * s.b_z).sqrt();
            assert!(b_mag < 3e-3, "B should vanish for the boundary family, got {b_mag}");
        }
    }

    #[test]
    fn discrete_divergence_of_reconstructed_field_shrinks_under_refinement() {
        // oracle: flux-form divergence applied to the nodal (b_r, b_theta)
        let prof = MuProfile::with_default_decay(
            ProfileFamily::Instability { amplitude: 0.002, beta: 1.0, delta: 0.5 },
            2.0,
        )
        .unwrap();
        let mut norms = Vec::new();
        for n in [12usize, 24] {
            let g = grid(2.0, n, 2 * n);
            let opts = PicardOptions { purely_magnetic: true, ..Default::default() };
            let eq = solve_picard(&g, &prof, &rule(), &opts).unwrap();
            let div = crate::geometry::assemble_divergence(&g);
            let mut hv = DVector::zeros(2 * g.len());
            for k in 0..g.len() {
                hv[k] = eq.b_r[k];
                hv[g.len() + k] = eq.b_theta[k];
            }
            let d = &div * &hv;
            // interior rows only: the closure rows of the divergence carry
            // stream-function ghost conventions the nodal gradients don't use
            let mut mask = vec![0.0; g.len()];
            for i in 1..g.n_r - 1 {
                for j in 0..g.n_theta {
                    let k = g.idx(i, j);
                    mask[k] = d[k];
                }
            }
            let b_scale = weighted_norm(&eq.b_r, &g) + weighted_norm(&eq.b_theta, &g);
            norms.push(weighted_norm(&mask, &g) / b_scale.max(1e-300));
        }
        // centered gradients commute with the centered divergence, so the
        // interior rows vanish to roundoff rather than truncation order
        assert!(norms.iter().all(|&v| v < 1e-12), "interior divergence: {norms:?}");
    }

    #[test]
    fn smooth_representation_tracks_nodal_solution() {
        let g = grid(2.0, 16, 32);
        let prof =
            MuProfile::with_default_decay(ProfileFamily::SmallMuP { amplitude: 0.2, eps: 0.3 }, 2.0)
                .unwrap();
        let eq = solve_picard(&g, &prof, &rule(), &PicardOptions::default()).unwrap();
        let mut worst = 0.0_f64;
        for i in 0..g.n_r {
            for j in 0..g.n_theta {
                let k = g.idx(i, j);
                let (got, _) = eq.potentials_at(g.r[i], g.theta[j]);
                worst = worst.max((got - eq.phi[k]).abs());
            }
        }
        let scale = eq.diagnostics.sup_phi.max(eq.diagnostics.sup_a);
        assert!(worst < 2e-3 * scale.max(1e-12), "fit error {worst} vs scale {scale}");
    }
}
