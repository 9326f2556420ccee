//! Dense assembly of the operator family behind the stability analysis.
//!
//! Scalar operators on Dirichlet grid functions (`lambda >= 0`; the
//! `lambda = 0` members use the kernel projection, positive `lambda` the
//! exponential trajectory average):
//!
//! ```text
//! A1 h = Delta h + sum± int mu_e (1 - Q) h dv
//! A2 h = (lambda^2 - Delta + 1/R^2) h
//!        - sum± int vhat_phi [ R mu_p h + mu_e Q(vhat_phi h) ] dv
//! B  h = - sum± int vhat_phi mu_e (1 - Q) h dv
//! L    = A2 - B A1^{-1} B*
//! ```
//!
//! plus the poloidal vector blocks tested against a divergence-free basis.
//! All matrices act on nodal vectors and are symmetrized in the w-metric;
//! the `lambda = 0` kinetic terms are assembled in Gram form through the
//! projection table, which makes them symmetric by construction.

use crate::equilibrium::Equilibrium;
use crate::geometry::{
    assemble_divergence, assemble_scalar_laplacian, assemble_vector_laplacian, metric_transpose,
    symmetrize_in_metric, weighted_inner_product, CrossSectionGrid, VelocityQuadrature, WSolver,
};
use crate::profiles::Species;
use crate::projections::{ProjectionBackend, ProjectionTable, TableSpec};
use crate::trajectories::{walk_backward, IntegrateOptions, PhaseState};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Assembly controls.
#[derive(Debug, Clone)]
pub struct AssemblyOptions {
    /// velocity rule for the kinetic integrals (reduced rules are fine for
    /// the scalar operators; vector blocks need a full tensor rule)
    pub rule: VelocityQuadrature,
    /// projection-table lattice (`lambda = 0` assembly)
    pub table: TableSpec,
    /// projection backend (`lambda = 0` assembly)
    pub backend: ProjectionBackend,
    /// exploit the reflection-symmetric pair: assemble the electron species
    /// only and double it (valid for purely magnetic symmetric equilibria)
    pub symmetric_shortcut: bool,
    /// relative asymmetry beyond which assembly is considered broken
    pub asym_tol: f64,
}

impl AssemblyOptions {
    pub fn homogeneous_default() -> Result<Self> {
        Ok(Self {
            rule: VelocityQuadrature::polar_reduced(12.0, 3, 3)?,
            table: TableSpec::default(),
            backend: ProjectionBackend::Homogeneous,
            symmetric_shortcut: false,
            asym_tol: 1e-6,
        })
    }

    pub fn trajectory_default() -> Result<Self> {
        Ok(Self {
            rule: VelocityQuadrature::polar_reduced(12.0, 3, 3)?,
            table: TableSpec::default(),
            backend: ProjectionBackend::default_trajectory(),
            symmetric_shortcut: false,
            asym_tol: 1e-6,
        })
    }
}

/// Dense symmetric discretization of the scalar operator family at one
/// `lambda`, in the w-metric of the grid.
pub struct OperatorSet {
    pub lambda: f64,
    pub a1: DMatrix<f64>,
    pub a2: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// metric transpose of `b` (used in Schur products)
    pub b_star: DMatrix<f64>,
    /// independently assembled adjoint, for the consistency report
    pub b_star_formula: DMatrix<f64>,
    pub l: Option<DMatrix<f64>>,
    /// relative asymmetry removed from `a1`/`a2` by symmetrization
    pub asym_a1: f64,
    pub asym_a2: f64,
    /// relative gap between the formula adjoint and the metric transpose
    pub b_pair_gap: f64,
}

impl OperatorSet {
    /// `<A2 h, h>_w` and friends through the stored matrices.
    pub fn form(&self, m: &DMatrix<f64>, h: &[f64], grid: &CrossSectionGrid) -> f64 {
        let hv = DVector::from_column_slice(h);
        weighted_inner_product((m * &hv).as_slice(), h, grid).expect("shape")
    }
}

fn species_list(opts: &AssemblyOptions) -> Vec<(Species, f64)> {
    if opts.symmetric_shortcut {
        vec![(Species::Electron, 2.0)]
    } else {
        vec![(Species::Ion, 1.0), (Species::Electron, 1.0)]
    }
}

/// Assemble the scalar operators at `lambda = 0` (projection-based).
pub fn assemble_scalar_ops(
    eq: &Equilibrium,
    opts: &AssemblyOptions,
    tables: &[(Species, ProjectionTable)],
) -> Result<OperatorSet> {
    let grid = &eq.grid;
    let n = grid.len();
    let a = grid.frame.a;
    let lap = assemble_scalar_laplacian(grid, false)?;
    let lap_shift = assemble_scalar_laplacian(grid, true)?;

    let mut a1 = lap.clone();
    // a2 starts as -(Delta - 1/R^2) = -lap_shift
    let mut a2 = -&lap_shift;
    let mut b = DMatrix::<f64>::zeros(n, n);
    let mut b_star_formula = DMatrix::<f64>::zeros(n, n);

    for (sp, mult) in species_list(opts) {
        let table = tables
            .iter()
            .find(|(s, _)| *s == sp)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Assembly(format!("missing projection table for {sp:?}")))?;
        let c = table.cells();
        let mut d_h = vec![0.0; n];
        let mut d_hv = vec![0.0; n];
        let mut d_p = vec![0.0; n];
        let mut d_p0 = vec![0.0; n];
        let mut omega_hat = DMatrix::<f64>::zeros(c, c);
        let mut lam0 = DMatrix::<f64>::zeros(n, c);
        let mut lamv = DMatrix::<f64>::zeros(n, c);
        let mut wts: Vec<(usize, f64)> = Vec::with_capacity(4);
        let s = sp.sign();
        for k in 0..n {
            let rr = grid.big_r[k];
            for (v, wv) in opts.rule.nodes.iter().zip(&opts.rule.weights) {
                let gamma = (1.0 + v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                let e = gamma + s * eq.phi[k];
                let p = rr * (v[2] + s * eq.a_phi[k]);
                let (_, mu_e, mu_p) = eq.profile.eval_all(sp, e, p);
                let vphi_hat = v[2] / gamma;
                let abs_mu_e = mu_e.abs();
                d_h[k] += wv * abs_mu_e;
                d_hv[k] += wv * abs_mu_e * vphi_hat;
                d_p[k] += wv * mu_p * vphi_hat * rr;
                d_p0[k] += wv * mu_p * rr;
                table.row_weights(a, e, p, &mut wts);
                let ww = grid.w[k] * wv * abs_mu_e;
                for &(ci, wi) in &wts {
                    for &(cj, wj) in &wts {
                        omega_hat[(ci, cj)] += ww * wi * wj;
                    }
                    lam0[(k, ci)] += wv * abs_mu_e * wi;
                    lamv[(k, ci)] += wv * abs_mu_e * vphi_hat * wi;
                }
            }
        }
        // Gram pieces through the table rows. The momentum-free kinetic term
        // of A1 is assembled as the exact square <(1-P)h, (1-P)g>_H =
        // <h,g>_H - C - C^T_w + <Ph,Pg>_H, which keeps A1 <= Delta (and so
        // negative definite) for any table error.
        let g0 = &table.avg_hat;
        let g1 = &table.avg_vphi_hat;
        let og0 = &omega_hat * g0;
        let og1 = &omega_hat * g1;
        let gram00 = g0.transpose() * &og0; // <P h, P g>_H
        let gram11 = g1.transpose() * &og1; // <P(vphi h), P(vphi g)>_H
        let cross = &lam0 * g0; // operator of <P h, g>_H
        for p in 0..n {
            let inv_w = mult / grid.w[p];
            for q in 0..n {
                let c_sym = cross[(p, q)] + grid.w[q] * cross[(q, p)] / grid.w[p];
                a1[(p, q)] += mult * c_sym - inv_w * gram00[(p, q)];
                a2[(p, q)] += inv_w * gram11[(p, q)];
            }
            a1[(p, p)] -= mult * d_h[p];
            a2[(p, p)] -= mult * d_p[p];
        }
        // B = sum± [ D_Hv - W^{-1} Lambda_v G0 ],
        // B*_formula = sum± [ D_p0 - W^{-1} Lambda_0 G1 ]
        let bv = &lamv * g0;
        let b0 = &lam0 * g1;
        for p in 0..n {
            for q in 0..n {
                b[(p, q)] += mult * (-bv[(p, q)]);
                b_star_formula[(p, q)] += mult * (-b0[(p, q)]);
            }
            b[(p, p)] += mult * d_hv[p];
            b_star_formula[(p, p)] += mult * d_p0[p];
        }
    }

    finalize_set(grid, 0.0, a1, a2, b, b_star_formula, opts.asym_tol)
}

fn finalize_set(
    grid: &CrossSectionGrid,
    lambda: f64,
    a1: DMatrix<f64>,
    a2: DMatrix<f64>,
    b: DMatrix<f64>,
    b_star_formula: DMatrix<f64>,
    asym_tol: f64,
) -> Result<OperatorSet> {
    let (a1s, asym_a1) = symmetrize_in_metric(&a1, grid, 1);
    let (a2s, asym_a2) = symmetrize_in_metric(&a2, grid, 1);
    if asym_a1 > asym_tol || asym_a2 > asym_tol {
        return Err(Error::Assembly(format!(
            "operator asymmetry beyond tolerance: a1 {asym_a1:.3e}, a2 {asym_a2:.3e} (tol {asym_tol:.1e})"
        )));
    }
    // pool the two independent assemblies of the cross operator
    let bsf_t = metric_transpose(&b_star_formula, grid, 1);
    let b_final = 0.5 * (&b + &bsf_t);
    let pair_gap = (&b - &bsf_t).norm() / b_final.norm().max(1e-300);
    let b_star = metric_transpose(&b_final, grid, 1);
    Ok(OperatorSet {
        lambda,
        a1: a1s,
        a2: a2s,
        b: b_final,
        b_star,
        b_star_formula,
        l: None,
        asym_a1,
        asym_a2,
        b_pair_gap: pair_gap,
    })
}

/// Schur complement `L = A2 - B A1^{-1} B*`; requires `A1` negative definite.
pub fn assemble_l(grid: &CrossSectionGrid, set: &mut OperatorSet) -> Result<()> {
    let neg_a1 = -&set.a1;
    let solver = WSolver::new(&neg_a1, grid, 1).map_err(|_| {
        // attach the upper part of the spectrum for the report
        let probe = crate::stability::smallest_eigenvalue_dense(&(-&set.a1), grid)
            .map(|(k, _)| k)
            .unwrap_or(f64::NAN);
        Error::Assembly(format!(
            "A1 is not negative definite (least eigenvalue of -A1: {probe:.3e})"
        ))
    })?;
    let n = grid.len();
    let mut correction = DMatrix::<f64>::zeros(n, n);
    for q in 0..n {
        let col = set.b_star.column(q).into_owned();
        let x = solver.solve(&col);
        // L = A2 + B (-A1)^{-1} B*
        let bx = &set.b * x;
        for p in 0..n {
            correction[(p, q)] = bx[p];
        }
    }
    let l = &set.a2 + correction;
    let (ls, _) = symmetrize_in_metric(&l, grid, 1);
    set.l = Some(ls);
    Ok(())
}

/// Term-by-term quadratic form of `A2` at `lambda = 0`:
/// `(total, gradient + curvature, momentum-slope term, projection term)`.
pub fn quadratic_form_a2(
    eq: &Equilibrium,
    opts: &AssemblyOptions,
    tables: &[(Species, ProjectionTable)],
    h: &[f64],
) -> Result<(f64, f64, f64, f64)> {
    let grid = &eq.grid;
    let elliptic = crate::geometry::dirichlet_energy(grid, h)
        + h.iter()
            .zip(&grid.w)
            .zip(&grid.big_r)
            .map(|((x, w), rr)| w * x * x / (rr * rr))
            .sum::<f64>();
    let mut mu_p_term = 0.0;
    let mut proj_term = 0.0;
    for (sp, mult) in species_list(opts) {
        let table = tables.iter().find(|(s, _)| *s == sp).map(|(_, t)| t);
        let s = sp.sign();
        let mut local = 0.0;
        for k in 0..grid.len() {
            let rr = grid.big_r[k];
            for (v, wv) in opts.rule.nodes.iter().zip(&opts.rule.weights) {
                let gamma = (1.0 + v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                let e = gamma + s * eq.phi[k];
                let p = rr * (v[2] + s * eq.a_phi[k]);
                let (_, _, mu_p) = eq.profile.eval_all(sp, e, p);
                local += grid.w[k] * wv * (v[2] / gamma) * rr * mu_p * h[k] * h[k];
            }
        }
        mu_p_term -= mult * local;
        proj_term +=
            mult * crate::projections::projected_vphi_norm(eq, sp, h, &opts.rule, table)?;
    }
    Ok((elliptic + mu_p_term + proj_term, elliptic, mu_p_term, proj_term))
}

// ---------------------------------------------------------------------------
// Divergence-free vector basis
// ---------------------------------------------------------------------------

/// Discrete divergence-free poloidal eigenbasis of the vector Laplacian.
pub struct DivFreeBasis {
    pub grid_len: usize,
    /// columns are w-orthonormal fields `[h_r; h_theta]`
    pub fields: DMatrix<f64>,
    pub sigmas: Vec<f64>,
    /// worst discrete-divergence residual over the basis
    pub div_residual: f64,
}

impl DivFreeBasis {
    /// Lowest `n_modes` eigenfields of `-Delta` restricted to the discrete
    /// divergence-free subspace with the conductor boundary closures.
    ///
    /// The subspace is the image of the discrete stream-function curl, so
    /// every basis field is divergence-free to roundoff and carries the wall
    /// conditions through the curl's ghost conventions.
    pub fn build(grid: &CrossSectionGrid, n_modes: usize) -> Result<Self> {
        let n = grid.len();
        let div = assemble_divergence(grid);
        let curl = crate::geometry::stream_curl(grid);

        // metric and energy restricted to the stream-function space
        let lap = assemble_vector_laplacian(grid);
        let mut wlap = -&lap;
        let mut wcurl = curl.clone();
        for k in 0..2 * n {
            let w = grid.w[k % n];
            for q in 0..n {
                wcurl[(k, q)] *= w;
            }
            for q in 0..2 * n {
                wlap[(k, q)] *= w;
            }
        }
        let tmat = {
            let t = curl.transpose() * (&wlap * &curl);
            0.5 * (&t + t.transpose())
        };
        let mmat = {
            let m = curl.transpose() * &wcurl;
            0.5 * (&m + m.transpose())
        };
        // whiten against the (rank-deficient) metric: constants and any
        // curl-kernel content drop out here
        let meig = mmat.symmetric_eigen();
        let mmax = meig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        let mut keep_cols = Vec::new();
        for (i, &ev) in meig.eigenvalues.iter().enumerate() {
            if ev > 1e-10 * mmax {
                keep_cols.push(i);
            }
        }
        if keep_cols.len() < n_modes {
            return Err(Error::Assembly(format!(
                "divergence-free subspace too small: {} < {n_modes}",
                keep_cols.len()
            )));
        }
        let d = keep_cols.len();
        let mut white = DMatrix::<f64>::zeros(n, d);
        for (c, &col) in keep_cols.iter().enumerate() {
            let scale = 1.0 / meig.eigenvalues[col].sqrt();
            for k in 0..n {
                white[(k, c)] = meig.eigenvectors[(k, col)] * scale;
            }
        }
        let reduced = {
            let r = white.transpose() * (&tmat * &white);
            0.5 * (&r + r.transpose())
        };
        let eig = reduced.symmetric_eigen();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].partial_cmp(&eig.eigenvalues[j]).unwrap());
        let keep = n_modes.min(d);
        let mut fields = DMatrix::<f64>::zeros(2 * n, keep);
        let mut sigmas = Vec::with_capacity(keep);
        for (c, &oi) in order.iter().take(keep).enumerate() {
            sigmas.push(eig.eigenvalues[oi]);
            let chi = &white * eig.eigenvectors.column(oi);
            let f = &curl * chi;
            for k in 0..2 * n {
                fields[(k, c)] = f[k];
            }
        }
        // divergence residual of the kept fields
        let mut worst = 0.0_f64;
        for c in 0..keep {
            let f = fields.column(c).into_owned();
            let r = &div * &f;
            let scale = f.amax().max(1e-300);
            worst = worst.max(r.amax() / scale);
        }
        Ok(Self { grid_len: n, fields, sigmas, div_residual: worst })
    }

    pub fn n_modes(&self) -> usize {
        self.sigmas.len()
    }

    /// Interpolated `(h_r, h_theta)` of mode `l` at a cross-section point.
    pub fn sample(&self, grid: &CrossSectionGrid, l: usize, r: f64, theta: f64) -> (f64, f64) {
        let n = self.grid_len;
        let col = self.fields.column(l);
        let st = grid.stencil_clamped(r, theta);
        let mut hr = 0.0;
        let mut ht = 0.0;
        for k in 0..st.n {
            hr += st.wts[k] * col[st.idx[k]];
            ht += st.wts[k] * col[n + st.idx[k]];
        }
        (hr, ht)
    }
}

// ---------------------------------------------------------------------------
// Positive-lambda assembly (streamed trajectory averages)
// ---------------------------------------------------------------------------

/// Vector blocks tested against the truncated basis at one `lambda`.
pub struct VectorBlocks {
    pub lambda: f64,
    /// `n x n` block of the composite vector operator (self-adjoint part)
    pub u_block: DMatrix<f64>,
    /// `n x N` reduced cross block
    pub v_block: DMatrix<f64>,
    /// raw tested rows of the two scalar-to-vector operators (`n x N`);
    /// their metric transposes are the adjoint columns
    pub t1_rows: DMatrix<f64>,
    pub t2_rows: DMatrix<f64>,
    /// asymmetry removed from the `u_block`
    pub asym_u: f64,
}

/// Options for the streamed positive-lambda assembly.
#[derive(Debug, Clone)]
pub struct LambdaOptions {
    /// full tensor rule (the vector blocks need poloidal velocity factors)
    pub rule: VelocityQuadrature,
    pub dt: f64,
    pub sample_stride: usize,
    /// horizon cap; each lambda integrates to `min(40/lambda, cap)` and
    /// completes the remaining exponential weight with the running average
    pub horizon_cap: f64,
    pub asym_tol: f64,
}

impl LambdaOptions {
    pub fn desk_default() -> Result<Self> {
        Ok(Self {
            rule: VelocityQuadrature::tensor(10.0, 6, 8)?,
            dt: 4e-3,
            sample_stride: 4,
            horizon_cap: 400.0,
            asym_tol: 5e-2,
        })
    }
}

/// Everything the continuation needs at a set of `lambda` values, assembled
/// in one streaming pass over the phase-space trajectories.
pub struct LambdaFamily {
    pub lambdas: Vec<f64>,
    pub sets: Vec<OperatorSet>,
    /// raw vector blocks per lambda (present when a basis was supplied)
    pub vector: Vec<VectorBlocks>,
}

struct SeedScratch {
    /// uniform running averages (tail completion)
    erg0: Vec<f64>,
    erg1: Vec<f64>,
    ergv: Vec<f64>,
    /// per-lambda exponential accumulators
    q0: Vec<Vec<f64>>,
    q1: Vec<Vec<f64>>,
    qv: Vec<Vec<f64>>,
    weight_sum: Vec<f64>,
    count: usize,
}

#[allow(clippy::too_many_arguments)]
fn stream_seed(
    eq: &Equilibrium,
    sp: Species,
    seed: &PhaseState,
    lambdas: &[f64],
    basis: Option<&DivFreeBasis>,
    opts: &LambdaOptions,
    horizon: f64,
    scratch: &mut SeedScratch,
) {
    let grid = &eq.grid;
    let n = grid.len();
    let nb = basis.map_or(0, |b| b.n_modes());
    let nl = lambdas.len();
    for v in scratch.erg0.iter_mut().chain(&mut scratch.erg1).chain(&mut scratch.ergv) {
        *v = 0.0;
    }
    for l in 0..nl {
        for v in scratch.q0[l].iter_mut().chain(&mut scratch.q1[l]).chain(&mut scratch.qv[l]) {
            *v = 0.0;
        }
        scratch.weight_sum[l] = 0.0;
    }
    scratch.count = 0;

    let dt_s = opts.dt * opts.sample_stride as f64;
    let iopts = IntegrateOptions { dt: opts.dt, ..Default::default() };
    let mut step = 0usize;
    // previous sample buffer for the interval-exact exponential quadrature:
    // over one sample interval the integrand is treated as linear, which
    // kills the endpoint bias a plain Riemann weighting would add at s = 0
    let mut prev: Option<(crate::geometry::Stencil, f64, [f64; 64], f64)> = None;
    walk_backward(eq, sp, &seed.to_point(), horizon, &iopts, |u, pt| {
        if step % opts.sample_stride != 0 {
            step += 1;
            return;
        }
        step += 1;
        let r = pt.r();
        let th = pt.theta();
        let st = grid.stencil_dirichlet(r, th);
        let vphi_hat = pt.v_phi / pt.gamma();
        scratch.count += 1;
        st.scatter(&mut scratch.erg0, 1.0);
        st.scatter(&mut scratch.erg1, vphi_hat);
        let mut vb = [0.0; 64];
        if let Some(bs) = basis {
            let gamma = pt.gamma();
            let vpol = pt.v_polar();
            for l in 0..nb {
                let (hr, ht) = bs.sample(grid, l, r, th);
                vb[l] = (vpol[0] * hr + vpol[1] * ht) / gamma;
                scratch.ergv[l] += vb[l];
            }
        }
        if let Some((pst, pvphi, pvb, pu)) = prev.as_ref() {
            for (li, &lam) in lambdas.iter().enumerate() {
                let x_lo = lam * pu;
                if x_lo > 45.0 {
                    continue;
                }
                let w_lo = (-x_lo).exp();
                let w_hi = (-lam * u).exp();
                let lam_dt = lam * dt_s;
                let i0 = w_lo - w_hi;
                let i1 = (w_lo - w_hi * (1.0 + lam_dt)) / lam_dt;
                let wp = i0 - i1;
                scratch.weight_sum[li] += i0;
                pst.scatter(&mut scratch.q0[li], wp);
                pst.scatter(&mut scratch.q1[li], wp * pvphi);
                st.scatter(&mut scratch.q0[li], i1);
                st.scatter(&mut scratch.q1[li], i1 * vphi_hat);
                for l in 0..nb {
                    scratch.qv[li][l] += wp * pvb[l] + i1 * vb[l];
                }
            }
        }
        prev = Some((st, vphi_hat, vb, u));
    });
    // the exponential part already integrates to 1 - e^{-lambda U}; complete
    // the remaining tail weight with the uniform average
    let count = scratch.count.max(1) as f64;
    for v in scratch.erg0.iter_mut().chain(&mut scratch.erg1).chain(&mut scratch.ergv) {
        *v /= count;
    }
    for (li, &lam) in lambdas.iter().enumerate() {
        let tail = (-lam * horizon).exp();
        let target = 1.0 - tail;
        let scale =
            if scratch.weight_sum[li] > 1e-300 { target / scratch.weight_sum[li] } else { 0.0 };
        for j in 0..n {
            scratch.q0[li][j] = scratch.q0[li][j] * scale + tail * scratch.erg0[j];
            scratch.q1[li][j] = scratch.q1[li][j] * scale + tail * scratch.erg1[j];
        }
        for l in 0..nb {
            scratch.qv[li][l] = scratch.qv[li][l] * scale + tail * scratch.ergv[l];
        }
    }
}

/// Assemble scalar operators (and vector blocks when a basis is given) at
/// every requested positive `lambda`, reusing one backward trajectory per
/// phase node across all of them.
pub fn assemble_lambda_family(
    eq: &Equilibrium,
    lambdas: &[f64],
    basis: Option<&DivFreeBasis>,
    opts: &LambdaOptions,
) -> Result<LambdaFamily> {
    if lambdas.iter().any(|&l| l <= 0.0) {
        return Err(Error::Assembly("positive-lambda assembly needs lambda > 0".into()));
    }
    if basis.map_or(false, |b| b.n_modes() > 64) {
        return Err(Error::Assembly("truncation larger than 64 modes not supported".into()));
    }
    let grid = &eq.grid;
    let n = grid.len();
    let nl = lambdas.len();
    let nb = basis.map_or(0, |b| b.n_modes());
    let lam_min = lambdas.iter().cloned().fold(f64::INFINITY, f64::min);
    let horizon = (40.0 / lam_min).min(opts.horizon_cap);

    let lap = assemble_scalar_laplacian(grid, false)?;
    let lap_shift = assemble_scalar_laplacian(grid, true)?;

    struct Partial {
        a1k: Vec<DMatrix<f64>>,
        a2k: Vec<DMatrix<f64>>,
        bk: Vec<DMatrix<f64>>,
        bsk: Vec<DMatrix<f64>>,
        sblk: Vec<DMatrix<f64>>,
        t1blk: Vec<DMatrix<f64>>,
        t2blk: Vec<DMatrix<f64>>,
        d_p: Vec<f64>,
        d_p0: Vec<f64>,
    }

    let vacuum = eq.profile.is_vacuum();
    let chunks: Vec<usize> = (0..n).collect();
    let partials: Vec<Partial> = chunks
        .par_chunks(n.div_ceil(8).max(1))
        .map(|nodes| {
            let mut part = Partial {
                a1k: vec![DMatrix::zeros(n, n); nl],
                a2k: vec![DMatrix::zeros(n, n); nl],
                bk: vec![DMatrix::zeros(n, n); nl],
                bsk: vec![DMatrix::zeros(n, n); nl],
                sblk: vec![DMatrix::zeros(nb, nb); nl],
                t1blk: vec![DMatrix::zeros(nb, n); nl],
                t2blk: vec![DMatrix::zeros(nb, n); nl],
                d_p: vec![0.0; n],
                d_p0: vec![0.0; n],
            };
            if vacuum {
                return part;
            }
            let mut scratch = SeedScratch {
                erg0: vec![0.0; n],
                erg1: vec![0.0; n],
                ergv: vec![0.0; nb],
                q0: vec![vec![0.0; n]; nl],
                q1: vec![vec![0.0; n]; nl],
                qv: vec![vec![0.0; nb]; nl],
                weight_sum: vec![0.0; nl],
                count: 0,
            };
            for &k in nodes {
                let (i, j) = (k / grid.n_theta, k % grid.n_theta);
                let (r0, th0) = (grid.r[i], grid.theta[j]);
                let rr = grid.big_r[k];
                for sp in Species::BOTH {
                    let s = sp.sign();
                    for (v, wv) in opts.rule.nodes.iter().zip(&opts.rule.weights) {
                        let gamma = (1.0 + v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                        let e = gamma + s * eq.phi[k];
                        let p = rr * (v[2] + s * eq.a_phi[k]);
                        let (_, mu_e, mu_p) = eq.profile.eval_all(sp, e, p);
                        if mu_e.abs() < 1e-300 {
                            continue;
                        }
                        let vphi_hat = v[2] / gamma;
                        part.d_p[k] += wv * mu_p * vphi_hat * rr;
                        part.d_p0[k] += wv * mu_p * rr;
                        let seed = PhaseState {
                            r: r0,
                            theta: th0,
                            v_r: v[0],
                            v_theta: v[1],
                            v_phi: v[2],
                        };
                        stream_seed(eq, sp, &seed, lambdas, basis, opts, horizon, &mut scratch);
                        // test weights against the basis at the seed
                        let mut tau = [0.0; 64];
                        if let Some(bs) = basis {
                            for l in 0..nb {
                                let (hr, ht) = bs.sample(grid, l, r0, th0);
                                tau[l] = (v[0] * hr + v[1] * ht) / gamma;
                            }
                        }
                        for li in 0..nl {
                            let q0 = &scratch.q0[li];
                            let q1 = &scratch.q1[li];
                            let qv = &scratch.qv[li];
                            for q in 0..n {
                                // A1 kinetic: mu_e (h - Q h)
                                part.a1k[li][(k, q)] -= wv * mu_e * q0[q];
                                // A2 kinetic: -vhat mu_e Q(vhat h)
                                part.a2k[li][(k, q)] -= wv * mu_e * vphi_hat * q1[q];
                                // B: -vhat mu_e (h - Q h)
                                part.bk[li][(k, q)] += wv * mu_e * vphi_hat * q0[q];
                                // B*: mu_e Q(vhat h)
                                part.bsk[li][(k, q)] += wv * mu_e * q1[q];
                            }
                            part.a1k[li][(k, k)] += wv * mu_e;
                            part.bk[li][(k, k)] -= wv * mu_e * vphi_hat;
                            let wk = grid.w[k] * wv * mu_e;
                            for l in 0..nb {
                                // S block: + (v.psi_l') mu_e Q(v.psi_l)
                                for l2 in 0..nb {
                                    part.sblk[li][(l, l2)] += wk * tau[l] * qv[l2];
                                }
                                // T1 tested: -(v.psi_l) mu_e Q(h)
                                // T2 tested: +(v.psi_l) mu_e Q(vhat_phi h)
                                for q in 0..n {
                                    part.t1blk[li][(l, q)] -= wk * tau[l] * q0[q];
                                    part.t2blk[li][(l, q)] += wk * tau[l] * q1[q];
                                }
                            }
                        }
                    }
                }
            }
            part
        })
        .collect();

    // sequential deterministic reduction
    let mut sets = Vec::with_capacity(nl);
    let mut vector = Vec::with_capacity(nl);
    for (li, &lam) in lambdas.iter().enumerate() {
        let mut a1 = lap.clone();
        let mut a2 = -&lap_shift;
        for p in 0..n {
            a2[(p, p)] += lam * lam;
        }
        let mut b = DMatrix::<f64>::zeros(n, n);
        let mut bs = DMatrix::<f64>::zeros(n, n);
        let mut sblk = DMatrix::<f64>::zeros(nb, nb);
        let mut t1 = DMatrix::<f64>::zeros(nb, n);
        let mut t2 = DMatrix::<f64>::zeros(nb, n);
        let mut d_p = vec![0.0; n];
        let mut d_p0 = vec![0.0; n];
        for part in &partials {
            a1 += &part.a1k[li];
            a2 += &part.a2k[li];
            b += &part.bk[li];
            bs += &part.bsk[li];
            sblk += &part.sblk[li];
            t1 += &part.t1blk[li];
            t2 += &part.t2blk[li];
            if li == 0 {
                for k in 0..n {
                    d_p[k] += part.d_p[k];
                    d_p0[k] += part.d_p0[k];
                }
            }
        }
        // local momentum-slope terms (lambda independent; recompute per li)
        if li > 0 {
            for part in &partials {
                for k in 0..n {
                    d_p[k] += part.d_p[k];
                    d_p0[k] += part.d_p0[k];
                }
            }
        }
        for k in 0..n {
            a2[(k, k)] -= d_p[k];
            bs[(k, k)] += d_p0[k];
        }
        let set = finalize_set(grid, lam, a1, a2, b, bs, opts.asym_tol)?;
        if let Some(bsz) = basis {
            let mut u_block = sblk;
            for l in 0..nb {
                u_block[(l, l)] -= lam * lam + bsz.sigmas[l];
            }
            let asym_u = {
                let t = u_block.transpose();
                let asym = 0.5 * (&u_block - &t);
                let a = asym.norm() / u_block.norm().max(1e-300);
                u_block = 0.5 * (&u_block + &t);
                a
            };
            // composite blocks need A1^{-1}; build the Schur pieces here
            let neg_a1 = -&set.a1;
            let solver = WSolver::new(&neg_a1, grid, 1)?;
            // U -= T1 A1^{-1} T1^T-ish: columns t_l = (T1 row l) as a vector
            // in the scalar space (T1 tested rows double as adjoint columns
            // thanks to the shared quadrature)
            let mut t1_solved = DMatrix::<f64>::zeros(n, nb);
            for l in 0..nb {
                let mut col = DVector::zeros(n);
                for q in 0..n {
                    // adjoint column: (T1^* psi_l)_q includes the 1/w factor
                    col[q] = t1[(l, q)] / grid.w[q];
                }
                let x = solver.solve(&col);
                for q in 0..n {
                    t1_solved[(q, l)] = x[q];
                }
            }
            let corr = &t1 * &t1_solved;
            // U = S - T1 A1^{-1} T1^* = S + T1 (-A1)^{-1} T1^*
            let u_final = {
                let u = &u_block + &corr;
                0.5 * (&u + u.transpose())
            };
            // V = T2 - T1 A1^{-1} B^* = T2 + T1 (-A1)^{-1} B^*
            let mut bstar_solved = DMatrix::<f64>::zeros(n, n);
            for q in 0..n {
                let col = set.b_star.column(q).into_owned();
                let x = solver.solve(&col);
                for pqi in 0..n {
                    bstar_solved[(pqi, q)] = x[pqi];
                }
            }
            let v_block = &t2 + &t1 * &bstar_solved;
            vector.push(VectorBlocks {
                lambda: lam,
                u_block: u_final,
                v_block,
                t1_rows: t1.clone(),
                t2_rows: t2.clone(),
                asym_u,
            });
        }
        sets.push(set);
    }
    Ok(LambdaFamily { lambdas: lambdas.to_vec(), sets, vector })
}

// ---------------------------------------------------------------------------
// Minimization identity
// ---------------------------------------------------------------------------

/// Both sides of the constrained-minimum identity for a prescribed vector
/// potential `(a_tilde (2N), a_phi (N))`:
/// left, the minimized energy evaluated by quadrature on the minimizer;
/// right, the operator expression. Returns `(lhs, rhs, relative gap)`.
pub fn minimizer_identity_check(
    eq: &Equilibrium,
    opts: &AssemblyOptions,
    tables: &[(Species, ProjectionTable)],
    set: &OperatorSet,
    a_tilde: &[f64],
    a_phi: &[f64],
) -> Result<(f64, f64, f64)> {
    let grid = &eq.grid;
    let n = grid.len();
    if a_tilde.len() != 2 * n || a_phi.len() != n {
        return Err(Error::ShapeMismatch { expected: 2 * n, got: a_tilde.len() });
    }
    let a = grid.frame.a;
    // phi_* = -A1^{-1} B* a_phi
    let neg_a1 = -&set.a1;
    let solver = WSolver::new(&neg_a1, grid, 1)?;
    let phi_star = solver.solve(&(&set.b_star * DVector::from_column_slice(a_phi)));

    // rhs: -<B A1^{-1} B* a, a>_w + sum± ||P(v.A)||_H^2
    //    = +<A1^{-1}... written through the solved vector
    let rhs_schur = {
        let ba = &set.b * &phi_star;
        weighted_inner_product(ba.as_slice(), a_phi, grid)?
    };
    let mut rhs_proj = 0.0;
    let mut lhs = 0.0;

    // minimizer F*± = ± mu_e (1 - P) phi_* ± mu_e P(v.A);
    // J(F*) = sum± || (1-P) phi_* + P(v.A) ||_H^2 + ||grad phi_*||^2
    let mut wts = Vec::with_capacity(4);
    for (sp, mult) in species_list(opts) {
        let table = tables
            .iter()
            .find(|(s, _)| *s == sp)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Assembly("missing table".into()))?;
        let s = sp.sign();
        let mut h_acc = 0.0;
        let mut p_acc = 0.0;
        for k in 0..n {
            let rr = grid.big_r[k];
            let (i, j) = (k / grid.n_theta, k % grid.n_theta);
            let _ = (i, j);
            for (v, wv) in opts.rule.nodes.iter().zip(&opts.rule.weights) {
                let gamma = (1.0 + v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                let e = gamma + s * eq.phi[k];
                let p = rr * (v[2] + s * eq.a_phi[k]);
                let (_, mu_e, _) = eq.profile.eval_all(sp, e, p);
                let abs_mu = mu_e.abs();
                table.row_weights(a, e, p, &mut wts);
                let mut p_phi = 0.0; // P(phi_*)
                let mut p_vphi = 0.0; // P(vhat_phi a_phi)
                for &(c, wc) in &wts {
                    for q in 0..n {
                        p_phi += wc * table.avg_hat[(c, q)] * phi_star[q];
                        p_vphi += wc * table.avg_vphi_hat[(c, q)] * a_phi[q];
                    }
                }
                // the poloidal part P(vhat . a_tilde) vanishes by oddness in
                // the poloidal velocity; the quadrature symmetrization keeps
                // only the toroidal channel through the table
                let u = phi_star[k] - p_phi + p_vphi;
                h_acc += grid.w[k] * wv * abs_mu * u * u;
                p_acc += grid.w[k] * wv * abs_mu * p_vphi * p_vphi;
            }
        }
        lhs += mult * h_acc;
        rhs_proj += mult * p_acc;
    }
    // Poisson energy of phi_*
    lhs += crate::geometry::dirichlet_energy(grid, phi_star.as_slice());

    let rhs = rhs_schur + rhs_proj;
    let gap = (lhs - rhs).abs() / rhs.abs().max(1e-12);
    let _ = a_tilde; // poloidal projections vanish for these equilibria
    Ok((lhs, rhs, gap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::{solve_picard, PicardOptions};
    use crate::geometry::ToroidalFrame;
    use crate::profiles::{MuProfile, ProfileFamily};

    fn grid(a: f64, nr: usize, nt: usize) -> CrossSectionGrid {
        CrossSectionGrid::new(ToroidalFrame::new(a).unwrap(), nr, nt).unwrap()
    }

    fn tables_for(
        eq: &Equilibrium,
        opts: &AssemblyOptions,
    ) -> Vec<(Species, ProjectionTable)> {
        Species::BOTH
            .iter()
            .map(|&sp| {
                (sp, ProjectionTable::build(eq, sp, opts.table, opts.backend).unwrap())
            })
            .collect()
    }

    #[test]
    fn vacuum_scalar_operators_reduce_to_elliptic_parts() {
        let g = grid(2.0, 8, 16);
        let prof = MuProfile::with_default_decay(ProfileFamily::Vacuum, 2.0).unwrap();
        let eq = Equilibrium::vacuum(&g, prof);
        let opts = AssemblyOptions::homogeneous_default().unwrap();
        let tables = tables_for(&eq, &opts);
        let mut set = assemble_scalar_ops(&eq, &opts, &tables).unwrap();
        let lap = assemble_scalar_laplacian(&g, false).unwrap();
        let lap_s = assemble_scalar_laplacian(&g, true).unwrap();
        assert!((&set.a1 - &lap).norm() < 1e-12 * lap.norm());
        assert!((&set.a2 - (-&lap_s)).norm() < 1e-12 * lap_s.norm());
        assert!(set.b.norm() < 1e-14);
        assemble_l(&g, &mut set).unwrap();
        let l = set.l.as_ref().unwrap();
        assert!((l - &set.a2).norm() < 1e-12 * set.a2.norm());
    }

    #[test]
    fn symmetric_profile_kills_the_cross_operator() {
        let g = grid(2.0, 10, 20);
        let prof = MuProfile::with_default_decay(ProfileFamily::StableEven { amplitude: 0.3 }, 2.0)
            .unwrap();
        let eq = Equilibrium::vacuum(&g, prof);
        let opts = AssemblyOptions::homogeneous_default().unwrap();
        let tables = tables_for(&eq, &opts);
        let set = assemble_scalar_ops(&eq, &opts, &tables).unwrap();
        let scale = set.a2.norm();
        assert!(set.b.norm() < 1e-8 * scale, "B norm {} vs scale {scale}", set.b.norm());
    }

    #[test]
    fn a1_negative_definite_and_l_schur_sign() {
        let g = grid(2.0, 10, 20);
        // an asymmetric pair so B does not vanish
        let prof =
            MuProfile::with_default_decay(ProfileFamily::SmallMuP { amplitude: 0.4, eps: 0.4 }, 2.0)
                .unwrap();
        let rule = VelocityQuadrature::polar_reduced(12.0, 4, 4).unwrap();
        let eq = solve_picard(&g, &prof, &rule, &PicardOptions::default()).unwrap();
        let opts = AssemblyOptions {
            backend: ProjectionBackend::Trajectory { horizon: 25.0, dt: 8e-3, stride: 2, n_pos: 32 },
            table: TableSpec { n_e: 10, n_u: 10, e_max: 8.0, u_pad: 0.15 },
            ..AssemblyOptions::trajectory_default().unwrap()
        };
        let tables = tables_for(&eq, &opts);
        let mut set = assemble_scalar_ops(&eq, &opts, &tables).unwrap();
        // negative definiteness of A1
        let (k, _) = crate::stability::smallest_eigenvalue_dense(&(-&set.a1), &g).unwrap();
        assert!(k > 0.0, "-A1 should be positive definite, least eig {k}");
        assemble_l(&g, &mut set).unwrap();
        // Schur correction is nonnegative: <L h, h> >= <A2 h, h>
        let l = set.l.clone().unwrap();
        for t in 0..5 {
            let h: Vec<f64> =
                (0..g.len()).map(|q| (((q * 31 + t * 17) % 13) as f64 - 6.0) / 6.0).collect();
            let ql = set.form(&l, &h, &g);
            let qa = set.form(&set.a2.clone(), &h, &g);
            assert!(ql >= qa - 1e-10 * qa.abs().max(1.0), "{ql} < {qa}");
        }
    }

    #[test]
    fn adjoint_pair_consistent_in_metric() {
        let g = grid(2.0, 10, 20);
        let prof =
            MuProfile::with_default_decay(ProfileFamily::SmallMuP { amplitude: 0.4, eps: 0.4 }, 2.0)
                .unwrap();
        let rule = VelocityQuadrature::polar_reduced(12.0, 4, 4).unwrap();
        let eq = solve_picard(&g, &prof, &rule, &PicardOptions::default()).unwrap();
        let opts = AssemblyOptions {
            backend: ProjectionBackend::Trajectory { horizon: 25.0, dt: 8e-3, stride: 2, n_pos: 32 },
            table: TableSpec { n_e: 10, n_u: 10, e_max: 8.0, u_pad: 0.15 },
            ..AssemblyOptions::trajectory_default().unwrap()
        };
        let tables = tables_for(&eq, &opts);
        let set = assemble_scalar_ops(&eq, &opts, &tables).unwrap();
        // transpose-in-metric oracle: <B h, g>_w = <h, B* g>_w to roundoff
        for t in 0..10 {
            let h: Vec<f64> =
                (0..g.len()).map(|q| (((q * 7 + t) % 11) as f64 - 5.0) / 5.0).collect();
            let gg: Vec<f64> =
                (0..g.len()).map(|q| (((q * 13 + 3 * t) % 17) as f64 - 8.0) / 8.0).collect();
            let bh = &set.b * DVector::from_column_slice(&h);
            let bsg = &set.b_star * DVector::from_column_slice(&gg);
            let lhs = weighted_inner_product(bh.as_slice(), &gg, &g).unwrap();
            let rhs = weighted_inner_product(&h, bsg.as_slice(), &g).unwrap();
            assert!(
                (lhs - rhs).abs() <= 1e-8 * lhs.abs().max(1e-8),
                "adjoint mismatch {lhs} vs {rhs}"
            );
        }
        // the independently assembled adjoint should be close to the metric
        // transpose relative to the kinetic magnitude (the cross operator
        // itself nearly cancels for this almost-symmetric pair)
        let kinetic_scale = {
            let lap_s = assemble_scalar_laplacian(&g, true).unwrap();
            (&set.a2 + &lap_s).norm()
        };
        let abs_gap = set.b_pair_gap * set.b.norm();
        assert!(
            abs_gap < 0.05 * kinetic_scale.max(1e-12),
            "pair gap {abs_gap} vs kinetic scale {kinetic_scale}"
        );
    }

    #[test]
    fn quadratic_form_decomposition_matches_matrix() {
        let g = grid(2.0, 10, 20);
        let prof = MuProfile::with_default_decay(
            ProfileFamily::Instability { amplitude: 0.4, beta: 1.0, delta: 0.0 },
            2.0,
        )
        .unwrap();
        let eq = Equilibrium::vacuum(&g, prof);
        let opts = AssemblyOptions::homogeneous_default().unwrap();
        let tables = tables_for(&eq, &opts);
        let set = assemble_scalar_ops(&eq, &opts, &tables).unwrap();
        let h: Vec<f64> = (0..g.len())
            .map(|k| {
                let (i, j) = (k / g.n_theta, k % g.n_theta);
                (1.0 - g.r[i] * g.r[i]) * (1.0 + 0.2 * g.theta[j].cos())
            })
            .collect();
        let (total, elliptic, mu_p, proj) = quadratic_form_a2(&eq, &opts, &tables, &h).unwrap();
        assert!(elliptic > 0.0);
        assert!(proj >= 0.0);
        let matrix_form = set.form(&set.a2.clone(), &h, &g);
        let component_scale = elliptic.abs() + mu_p.abs() + proj.abs();
        assert!(
            (total - matrix_form).abs() < 3e-3 * component_scale,
            "decomposition {total} vs matrix {matrix_form} (elliptic {elliptic}, mu_p {mu_p}, proj {proj})"
        );
    }

    #[test]
    fn vacuum_quadratic_form_has_no_kinetic_terms() {
        let g = grid(2.0, 8, 16);
        let prof = MuProfile::with_default_decay(ProfileFamily::Vacuum, 2.0).unwrap();
        let eq = Equilibrium::vacuum(&g, prof);
        let opts = AssemblyOptions::homogeneous_default().unwrap();
        let tables = tables_for(&eq, &opts);
        let h: Vec<f64> = (0..g.len()).map(|k| ((k % 5) as f64 - 2.0) / 2.0).collect();
        let (_, _, mu_p, proj) = quadratic_form_a2(&eq, &opts, &tables, &h).unwrap();
        assert_eq!(mu_p, 0.0);
        assert_eq!(proj, 0.0);
    }

    #[test]
    fn divfree_basis_has_clean_divergence_and_ordered_spectrum() {
        let g = grid(2.0, 10, 20);
        let basis = DivFreeBasis::build(&g, 12).unwrap();
        assert_eq!(basis.n_modes(), 12);
        assert!(basis.div_residual < 1e-9, "divergence residual {}", basis.div_residual);
        for w in basis.sigmas.windows(2) {
            assert!(w[0] <= w[1] + 1e-9);
        }
        assert!(basis.sigmas[0] > 0.0, "lowest vector eigenvalue {}", basis.sigmas[0]);
        // w-orthonormality
        let n = g.len();
        for i in 0..basis.n_modes() {
            for j in 0..basis.n_modes() {
                let mut ip = 0.0;
                for k in 0..2 * n {
                    ip += basis.fields[(k, i)] * basis.fields[(k, j)] * g.w[k % n];
                }
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((ip - want).abs() < 1e-9, "orthonormality ({i},{j}): {ip}");
            }
        }
        // angular component vanishes at the wall (closure sense)
        for l in 0..3 {
            for j in 0..g.n_theta {
                let last = basis.fields[(n + g.idx(g.n_r - 1, j), l)];
                let prev = basis.fields[(n + g.idx(g.n_r - 2, j), l)];
                let wall = 1.5 * last - 0.5 * prev;
                let scale = basis
                    .fields
                    .column(l)
                    .iter()
                    .fold(0.0_f64, |m, &v| m.max(v.abs()));
                assert!(wall.abs() < 0.25 * scale, "wall h_theta {wall} vs scale {scale}");
            }
        }
    }

    #[test]
    fn vacuum_lambda_family_is_diagonal_in_the_basis() {
        let g = grid(2.0, 8, 16);
        let prof = MuProfile::with_default_decay(ProfileFamily::Vacuum, 2.0).unwrap();
        let eq = Equilibrium::vacuum(&g, prof);
        let basis = DivFreeBasis::build(&g, 6).unwrap();
        let opts = LambdaOptions::desk_default().unwrap();
        let lambdas = [0.5, 2.0];
        let fam = assemble_lambda_family(&eq, &lambdas, Some(&basis), &opts).unwrap();
        for (li, lam) in lambdas.iter().enumerate() {
            let vb = &fam.vector[li];
            for l in 0..6 {
                for l2 in 0..6 {
                    let want = if l == l2 { -(lam * lam + basis.sigmas[l]) } else { 0.0 };
                    assert!(
                        (vb.u_block[(l, l2)] - want).abs() < 1e-9 * want.abs().max(1.0),
                        "U[{l},{l2}] = {} vs {want}",
                        vb.u_block[(l, l2)]
                    );
                }
            }
            assert!(vb.v_block.norm() < 1e-12);
            // scalar parts: A2 = lambda^2 - Delta + 1/R^2
            let lap_s = assemble_scalar_laplacian(&g, true).unwrap();
            let mut want_a2 = -&lap_s;
            for k in 0..g.len() {
                want_a2[(k, k)] += lam * lam;
            }
            assert!((&fam.sets[li].a2 - &want_a2).norm() < 1e-12 * want_a2.norm());
        }
    }

    #[test]
    fn minimizer_identity_trivial_for_zero_potential() {
        let g = grid(2.0, 8, 16);
        let prof = MuProfile::with_default_decay(ProfileFamily::StableEven { amplitude: 0.3 }, 2.0)
            .unwrap();
        let eq = Equilibrium::vacuum(&g, prof);
        let opts = AssemblyOptions::homogeneous_default().unwrap();
        let tables = tables_for(&eq, &opts);
        let mut set = assemble_scalar_ops(&eq, &opts, &tables).unwrap();
        assemble_l(&g, &mut set).unwrap();
        let zero2 = vec![0.0; 2 * g.len()];
        let zero1 = vec![0.0; g.len()];
        let (lhs, rhs, _) =
            minimizer_identity_check(&eq, &opts, &tables, &set, &zero2, &zero1).unwrap();
        assert_eq!(lhs, 0.0);
        assert_eq!(rhs, 0.0);
    }

    #[test]
    fn minimizer_identity_holds_for_toroidal_potentials() {
        let g = grid(2.0, 12, 24);
        let prof = MuProfile::with_default_decay(ProfileFamily::StableEven { amplitude: 0.3 }, 2.0)
            .unwrap();
        let eq = Equilibrium::vacuum(&g, prof);
        let opts = AssemblyOptions {
            table: TableSpec { n_e: 28, n_u: 28, ..Default::default() },
            ..AssemblyOptions::homogeneous_default().unwrap()
        };
        let tables = tables_for(&eq, &opts);
        let mut set = assemble_scalar_ops(&eq, &opts, &tables).unwrap();
        assemble_l(&g, &mut set).unwrap();
        let a_phi: Vec<f64> = (0..g.len())
            .map(|k| {
                let (i, j) = (k / g.n_theta, k % g.n_theta);
                (1.0 - g.r[i] * g.r[i]) * (1.0 + 0.3 * g.theta[j].sin())
            })
            .collect();
        let zero2 = vec![0.0; 2 * g.len()];
        let (lhs, rhs, gap) =
            minimizer_identity_check(&eq, &opts, &tables, &set, &zero2, &a_phi).unwrap();
        assert!(gap < 0.03, "identity gap {gap}: lhs {lhs}, rhs {rhs}");
    }
}
