//! Toroidal coordinate kit: cross-section discretization, metric-weighted
//! inner products, divergence-form Laplacians and velocity-space quadrature.
//!
//! Coordinates are `(r, theta, phi)` with
//! `x1 = (a + r cos(theta)) cos(phi)`, `x2 = (a + r cos(theta)) sin(phi)`,
//! `x3 = r sin(theta)`; the minor radius is 1 and the major radius `a > 1`.
//! The volume element for toroidally symmetric integrands is
//! `2 pi r (a + r cos(theta)) dr dtheta`, which is the weight behind every
//! inner product in this crate (the "w-metric").

use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Simple toroidal frame with minor radius fixed at 1.
#[derive(Debug, Clone, Copy)]
pub struct ToroidalFrame {
    /// Major radius, strictly greater than 1.
    pub a: f64,
}

impl ToroidalFrame {
    pub fn new(a: f64) -> Result<Self> {
        if !(a > 1.0) || !a.is_finite() {
            return Err(Error::Geometry(format!("major radius must satisfy a > 1, got {a}")));
        }
        Ok(Self { a })
    }

    /// Distance from the symmetry axis, `R = a + r cos(theta)`.
    #[inline]
    pub fn big_r(&self, r: f64, theta: f64) -> f64 {
        self.a + r * theta.cos()
    }

    /// Orthonormal basis `(e_r, e_theta, e_phi)` at angles `(theta, phi)`.
    pub fn basis(&self, theta: f64, phi: f64) -> [[f64; 3]; 3] {
        let (st, ct) = theta.sin_cos();
        let (sp, cp) = phi.sin_cos();
        [
            [ct * cp, ct * sp, st],
            [-st * cp, -st * sp, ct],
            [-sp, cp, 0.0],
        ]
    }
}

/// Closure applied at the wall `r = 1` when assembling radial fluxes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WallClosure {
    /// Homogeneous Dirichlet value at the wall.
    Dirichlet,
    /// `d_r h + c(theta) h = 0` at the wall.
    Robin,
    /// Zero flux through the wall.
    Neumann,
}

/// Polar cross-section grid with half-cell radial offset.
///
/// Nodes sit at `r_i = (i + 1/2) dr`, `theta_j = j dtheta` (theta periodic),
/// so no node touches the coordinate singularity at `r = 0` and the innermost
/// radial flux face carries a factor `r = 0` that closes the stencil there
/// without any boundary condition.
#[derive(Debug, Clone)]
pub struct CrossSectionGrid {
    pub frame: ToroidalFrame,
    pub n_r: usize,
    pub n_theta: usize,
    pub dr: f64,
    pub dtheta: f64,
    pub r: Vec<f64>,
    pub theta: Vec<f64>,
    /// Node weights `2 pi r_i (a + r_i cos theta_j) dr dtheta`, row-major in
    /// `(i, j)`.
    pub w: Vec<f64>,
    /// `R_ij = a + r_i cos theta_j` at the nodes.
    pub big_r: Vec<f64>,
}

impl CrossSectionGrid {
    pub fn new(frame: ToroidalFrame, n_r: usize, n_theta: usize) -> Result<Self> {
        if n_r < 2 || n_theta < 4 {
            return Err(Error::Geometry(format!(
                "grid too coarse: n_r = {n_r} (need >= 2), n_theta = {n_theta} (need >= 4)"
            )));
        }
        let dr = 1.0 / n_r as f64;
        let dtheta = std::f64::consts::TAU / n_theta as f64;
        let r: Vec<f64> = (0..n_r).map(|i| (i as f64 + 0.5) * dr).collect();
        let theta: Vec<f64> = (0..n_theta).map(|j| j as f64 * dtheta).collect();
        let mut w = Vec::with_capacity(n_r * n_theta);
        let mut big_r = Vec::with_capacity(n_r * n_theta);
        for &ri in &r {
            for &tj in &theta {
                let rr = frame.big_r(ri, tj);
                if rr <= 0.0 {
                    return Err(Error::Geometry(format!(
                        "non-positive toroidal weight at r = {ri}, theta = {tj}"
                    )));
                }
                big_r.push(rr);
                w.push(std::f64::consts::TAU * ri * rr * dr * dtheta);
            }
        }
        Ok(Self { frame, n_r, n_theta, dr, dtheta, r, theta, w, big_r })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n_r * self.n_theta
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.n_theta + j
    }

    /// Sum of node weights; converges to the torus volume `2 pi^2 a`.
    pub fn volume(&self) -> f64 {
        self.w.iter().sum()
    }

    /// Indices of the outermost ring (the ring adjacent to the wall).
    pub fn boundary_ring(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_theta).map(move |j| self.idx(self.n_r - 1, j))
    }

    /// Bilinear stencil for a point `(r, theta)`; wall side treated as
    /// homogeneous Dirichlet (functions vanish at `r = 1`).
    pub fn stencil_dirichlet(&self, r: f64, theta: f64) -> Stencil {
        self.stencil_impl(r, theta, true)
    }

    /// Bilinear stencil clamping the radial coordinate to the node range
    /// (for fields with non-Dirichlet wall behavior).
    pub fn stencil_clamped(&self, r: f64, theta: f64) -> Stencil {
        self.stencil_impl(r, theta, false)
    }

    fn theta_pair(&self, theta: f64) -> (usize, usize, f64) {
        let t = theta.rem_euclid(std::f64::consts::TAU);
        let x = t / self.dtheta;
        let j0 = (x.floor() as usize) % self.n_theta;
        let j1 = (j0 + 1) % self.n_theta;
        (j0, j1, x - x.floor())
    }

    fn stencil_impl(&self, r: f64, theta: f64, dirichlet_wall: bool) -> Stencil {
        let r0 = self.r[0];
        let r_last = self.r[self.n_r - 1];
        let (j0, j1, tt) = self.theta_pair(theta);
        let mut st = Stencil::default();
        if r < r0 {
            // Through-center interpolation between the first ring at theta and
            // at theta + pi.
            let (k0, k1, ss) = self.theta_pair(theta + std::f64::consts::PI);
            let alpha = 0.5 * (r0 + r.max(0.0)) / r0;
            st.push(self.idx(0, j0), alpha * (1.0 - tt));
            st.push(self.idx(0, j1), alpha * tt);
            st.push(self.idx(0, k0), (1.0 - alpha) * (1.0 - ss));
            st.push(self.idx(0, k1), (1.0 - alpha) * ss);
        } else if r >= r_last {
            if dirichlet_wall {
                // Linear decay to zero at the wall over the half cell.
                let f = (1.0 - (r.min(1.0) - r_last) / (0.5 * self.dr)).max(0.0);
                st.push(self.idx(self.n_r - 1, j0), f * (1.0 - tt));
                st.push(self.idx(self.n_r - 1, j1), f * tt);
            } else {
                st.push(self.idx(self.n_r - 1, j0), 1.0 - tt);
                st.push(self.idx(self.n_r - 1, j1), tt);
            }
        } else {
            let x = r / self.dr - 0.5;
            let i0 = x.floor() as usize;
            let i1 = i0 + 1;
            let rr = x - x.floor();
            st.push(self.idx(i0, j0), (1.0 - rr) * (1.0 - tt));
            st.push(self.idx(i0, j1), (1.0 - rr) * tt);
            st.push(self.idx(i1, j0), rr * (1.0 - tt));
            st.push(self.idx(i1, j1), rr * tt);
        }
        st
    }

    /// Interpolate nodal values at `(r, theta)` with the Dirichlet stencil.
    pub fn interp_dirichlet(&self, values: &[f64], r: f64, theta: f64) -> f64 {
        self.stencil_dirichlet(r, theta).dot(values)
    }

    /// Interpolate nodal values at `(r, theta)` with the clamped stencil.
    pub fn interp_clamped(&self, values: &[f64], r: f64, theta: f64) -> f64 {
        self.stencil_clamped(r, theta).dot(values)
    }
}

/// Up to four (index, weight) interpolation pairs.
#[derive(Debug, Clone, Copy, Default)]
pub struct Stencil {
    pub n: usize,
    pub idx: [usize; 4],
    pub wts: [f64; 4],
}

impl Stencil {
    #[inline]
    fn push(&mut self, idx: usize, w: f64) {
        self.idx[self.n] = idx;
        self.wts[self.n] = w;
        self.n += 1;
    }

    #[inline]
    pub fn dot(&self, values: &[f64]) -> f64 {
        let mut s = 0.0;
        for k in 0..self.n {
            s += self.wts[k] * values[self.idx[k]];
        }
        s
    }

    #[inline]
    pub fn scatter(&self, target: &mut [f64], scale: f64) {
        for k in 0..self.n {
            target[self.idx[k]] += scale * self.wts[k];
        }
    }
}

/// `sum_ij f_ij g_ij w_ij` — the discrete `L2` pairing under the toroidal
/// measure.
pub fn weighted_inner_product(f: &[f64], g: &[f64], grid: &CrossSectionGrid) -> Result<f64> {
    if f.len() != grid.len() || g.len() != grid.len() {
        return Err(Error::ShapeMismatch { expected: grid.len(), got: f.len().max(g.len()) });
    }
    Ok(f.iter().zip(g).zip(&grid.w).map(|((a, b), w)| a * b * w).sum())
}

/// w-weighted norm.
pub fn weighted_norm(f: &[f64], grid: &CrossSectionGrid) -> f64 {
    f.iter().zip(&grid.w).map(|(a, w)| a * a * w).sum::<f64>().sqrt()
}

/// Assemble the scalar Laplacian in divergence form,
/// `Delta h = (1/(rR)) d_r(rR d_r h) + (1/(r^2 R)) d_theta(R d_theta h)`,
/// with homogeneous Dirichlet closure at `r = 1`.
///
/// The `shifted` variant subtracts the diagonal `1/R^2`, so that the returned
/// matrix is the negative of the toroidal-component operator
/// `-Delta + 1/(a + r cos theta)^2`. Either way `-M` is positive definite on
/// Dirichlet grid functions and `M` is exactly symmetric in the w-metric.
pub fn assemble_scalar_laplacian(grid: &CrossSectionGrid, shifted: bool) -> Result<DMatrix<f64>> {
    if grid.w.iter().any(|&w| w <= 0.0) {
        return Err(Error::Geometry("non-positive grid weights".into()));
    }
    let mut m = assemble_flux_laplacian(grid, WallClosure::Dirichlet, None);
    if shifted {
        for k in 0..grid.len() {
            m[(k, k)] -= 1.0 / (grid.big_r[k] * grid.big_r[k]);
        }
    }
    Ok(m)
}

/// Flux-form Laplacian on nodal scalars with a selectable wall closure.
///
/// `robin_c` supplies the Robin coefficient `c(theta)` when the closure is
/// `Robin`. The assembly is face-based, so `W M` is symmetric to roundoff.
pub fn assemble_flux_laplacian(
    grid: &CrossSectionGrid,
    wall: WallClosure,
    robin_c: Option<&dyn Fn(f64) -> f64>,
) -> DMatrix<f64> {
    let n = grid.len();
    let (nr, nt) = (grid.n_r, grid.n_theta);
    let (dr, dt) = (grid.dr, grid.dtheta);
    let a = grid.frame.a;
    let mut m = DMatrix::<f64>::zeros(n, n);

    // Radial faces between rings i and i+1 (face radius r_{i+1/2} = (i+1) dr).
    for i in 0..nr - 1 {
        let rf = (i + 1) as f64 * dr;
        for j in 0..nt {
            let rr_face = a + rf * grid.theta[j].cos();
            let cap = rf * rr_face / dr; // face conductance, up to 1/(w-density)
            let p = grid.idx(i, j);
            let q = grid.idx(i + 1, j);
            let wp = grid.r[i] * grid.big_r[p] * dr;
            let wq = grid.r[i + 1] * grid.big_r[q] * dr;
            m[(p, p)] -= cap / wp;
            m[(p, q)] += cap / wp;
            m[(q, q)] -= cap / wq;
            m[(q, p)] += cap / wq;
        }
    }
    // Wall faces at r = 1 (the gradient reaches over the half cell).
    match wall {
        WallClosure::Dirichlet => {
            for j in 0..nt {
                let rr_face = a + grid.theta[j].cos();
                let cap = rr_face / (0.5 * dr);
                let p = grid.idx(nr - 1, j);
                let wp = grid.r[nr - 1] * grid.big_r[p] * dr;
                m[(p, p)] -= cap / wp;
            }
        }
        WallClosure::Robin => {
            let c = robin_c.expect("Robin closure requires a coefficient");
            for j in 0..nt {
                let cj = c(grid.theta[j]);
                let denom = 1.0 + 0.5 * dr * cj;
                assert!(
                    denom.abs() > 1e-8,
                    "Robin closure degenerate: c dr/2 near -1 (refine the radial grid)"
                );
                let rr_face = a + grid.theta[j].cos();
                // flux = R_w * d_r h(1) = -R_w * c * h(1), h(1) = h_last / denom
                let cap = rr_face * cj / denom;
                let p = grid.idx(nr - 1, j);
                let wp = grid.r[nr - 1] * grid.big_r[p] * dr;
                m[(p, p)] -= cap / wp;
            }
        }
        WallClosure::Neumann => {}
    }
    // Angular faces between j and j+1 (periodic); conductance (R_face / r^2)/dt.
    for i in 0..nr {
        let ri = grid.r[i];
        for j in 0..nt {
            let j1 = (j + 1) % nt;
            let tf = (j as f64 + 0.5) * dt;
            let rr_face = a + ri * tf.cos();
            let cap = rr_face / (ri * ri * dt);
            let p = grid.idx(i, j);
            let q = grid.idx(i, j1);
            let wp = ri * grid.big_r[p] * dt;
            let wq = ri * grid.big_r[q] * dt;
            m[(p, p)] -= cap / wp;
            m[(p, q)] += cap / wp;
            m[(q, q)] -= cap / wq;
            m[(q, p)] += cap / wq;
        }
    }
    m
}

/// Energy (Dirichlet form) of the flux Laplacian:
/// `<-Delta h, h>_w = sum over faces of conductance * jump^2 * 2 pi`.
/// Used so that quadratic-form decompositions match the matrix exactly.
pub fn dirichlet_energy(grid: &CrossSectionGrid, h: &[f64]) -> f64 {
    let lap = assemble_flux_laplacian(grid, WallClosure::Dirichlet, None);
    let hv = DVector::from_column_slice(h);
    let lh = &lap * &hv;
    -weighted_inner_product(lh.as_slice(), h, grid).expect("shape checked")
}

/// Nodal gradient `(d_r h, (1/r) d_theta h)` with centered differences,
/// one-sided at the first ring and Dirichlet-aware at the wall.
pub fn nodal_gradient(
    grid: &CrossSectionGrid,
    h: &[f64],
    wall: WallClosure,
) -> (Vec<f64>, Vec<f64>) {
    let (nr, nt) = (grid.n_r, grid.n_theta);
    let mut gr = vec![0.0; grid.len()];
    let mut gt = vec![0.0; grid.len()];
    for i in 0..nr {
        for j in 0..nt {
            let p = grid.idx(i, j);
            let jm = (j + nt - 1) % nt;
            let jp = (j + 1) % nt;
            gt[p] = (h[grid.idx(i, jp)] - h[grid.idx(i, jm)]) / (2.0 * grid.dtheta * grid.r[i]);
            gr[p] = if i == 0 {
                // Across the center: pair with the antipodal first-ring node.
                let anti = grid.idx(0, (j + nt / 2) % nt);
                (h[grid.idx(1, j)] - h[anti]) / (grid.r[1] + grid.r[0])
            } else if i == nr - 1 {
                match wall {
                    WallClosure::Dirichlet => fd_wall_dirichlet(h[grid.idx(i - 1, j)], h[p], grid.dr),
                    _ => (h[p] - h[grid.idx(i - 1, j)]) / grid.dr,
                }
            } else {
                (h[grid.idx(i + 1, j)] - h[grid.idx(i - 1, j)]) / (2.0 * grid.dr)
            };
        }
    }
    (gr, gt)
}

// Three-point one-sided derivative at the last node using h(1) = 0.
// Nodes at offsets (-dr, 0, +dr/2); Lagrange derivative at the middle one.
#[inline]
fn fd_wall_dirichlet(h_prev: f64, h_last: f64, dr: f64) -> f64 {
    -h_prev / (3.0 * dr) - h_last / dr
}

/// Discrete divergence of a poloidal 2-vector field, centered form:
/// `div h = (1/(rR)) [d_r(rR h_r) + d_theta(R h_theta)]`.
///
/// Layout of the argument: `[h_r; h_theta]`, each of grid length. Closures:
/// the radial derivative at the first ring reaches across the axis to the
/// antipodal node (where the flux function `rR h_r` changes sign through the
/// center), and at the wall it uses a flat ghost for `rR h_r`. These are
/// exactly the conventions under which discrete stream-function curls are
/// annihilated, see [`stream_curl`].
pub fn assemble_divergence(grid: &CrossSectionGrid) -> DMatrix<f64> {
    let n = grid.len();
    let (nr, nt) = (grid.n_r, grid.n_theta);
    let (dr, dt) = (grid.dr, grid.dtheta);
    let mut m = DMatrix::<f64>::zeros(n, 2 * n);
    // rR factor at each node
    let frr: Vec<f64> = (0..n).map(|k| grid.r[k / nt] * grid.big_r[k]).collect();
    for i in 0..nr {
        for j in 0..nt {
            let p = grid.idx(i, j);
            let inv_w = 1.0 / frr[p];
            // d_r(rR h_r), centered
            if i == 0 {
                let anti = grid.idx(0, (j + nt / 2) % nt);
                let up = grid.idx(1, j);
                // the ghost value of rR h_r at signed radius -r0 equals the
                // antipodal value (both the radius sign and the radial unit
                // vector flip through the center)
                m[(p, up)] += frr[up] / (2.0 * dr) * inv_w;
                m[(p, anti)] -= frr[anti] / (2.0 * dr) * inv_w;
            } else if i == nr - 1 {
                // flat wall ghost: ghost(rR h_r) = (rR h_r)_last
                let dn = grid.idx(i - 1, j);
                m[(p, p)] += frr[p] / (2.0 * dr) * inv_w;
                m[(p, dn)] -= frr[dn] / (2.0 * dr) * inv_w;
            } else {
                let up = grid.idx(i + 1, j);
                let dn = grid.idx(i - 1, j);
                m[(p, up)] += frr[up] / (2.0 * dr) * inv_w;
                m[(p, dn)] -= frr[dn] / (2.0 * dr) * inv_w;
            }
            // d_theta(R h_theta), centered periodic
            let jp = grid.idx(i, (j + 1) % nt);
            let jm = grid.idx(i, (j + nt - 1) % nt);
            m[(p, n + jp)] += grid.big_r[jp] / (2.0 * dt) * inv_w;
            m[(p, n + jm)] -= grid.big_r[jm] / (2.0 * dt) * inv_w;
        }
    }
    m
}

/// Discrete stream-function curl: maps nodal `chi` to the poloidal field
/// `h_r = (1/(rR)) d_theta chi`, `h_theta = -(1/R) d_r chi`, with a flat
/// ghost for `chi` at the wall (which encodes both conductor boundary
/// conditions: the angular component vanishes and the radial component
/// satisfies its Robin relation, since the Robin coefficient is exactly
/// `(rR)'/(rR)` at the wall) and antipodal continuation across the axis.
/// Fields in the image satisfy `assemble_divergence * h = 0` to roundoff.
pub fn stream_curl(grid: &CrossSectionGrid) -> DMatrix<f64> {
    let n = grid.len();
    let (nr, nt) = (grid.n_r, grid.n_theta);
    let (dr, dt) = (grid.dr, grid.dtheta);
    let mut c = DMatrix::<f64>::zeros(2 * n, n);
    for i in 0..nr {
        for j in 0..nt {
            let p = grid.idx(i, j);
            let inv_rr = 1.0 / (grid.r[i] * grid.big_r[p]);
            // h_r = (1/(rR)) d_theta chi
            let jp = grid.idx(i, (j + 1) % nt);
            let jm = grid.idx(i, (j + nt - 1) % nt);
            c[(p, jp)] += inv_rr / (2.0 * dt);
            c[(p, jm)] -= inv_rr / (2.0 * dt);
            // h_theta = -(1/R) d_r chi
            let inv_r = -1.0 / grid.big_r[p];
            if i == 0 {
                let anti = grid.idx(0, (j + nt / 2) % nt);
                let up = grid.idx(1, j);
                c[(n + p, up)] += inv_r / (2.0 * dr);
                c[(n + p, anti)] -= inv_r / (2.0 * dr);
            } else if i == nr - 1 {
                let dn = grid.idx(i - 1, j);
                // flat ghost: chi_ghost = chi_last
                c[(n + p, p)] += inv_r / (2.0 * dr);
                c[(n + p, dn)] -= inv_r / (2.0 * dr);
            } else {
                let up = grid.idx(i + 1, j);
                let dn = grid.idx(i - 1, j);
                c[(n + p, up)] += inv_r / (2.0 * dr);
                c[(n + p, dn)] -= inv_r / (2.0 * dr);
            }
        }
    }
    c
}

/// Vector Laplacian on poloidal fields `[h_r; h_theta]` (no `e_phi` part),
/// assembled so that the result is exactly symmetric in the w-metric:
/// the theta-r coupling block is the metric transpose of the r-theta block.
///
/// Wall closures: Robin `d_r h_r + (a + 2 cos)/(a + cos) h_r = 0` on the
/// radial component, Dirichlet on the angular component.
pub fn assemble_vector_laplacian(grid: &CrossSectionGrid) -> DMatrix<f64> {
    let n = grid.len();
    let a = grid.frame.a;
    let robin = move |theta: f64| (a + 2.0 * theta.cos()) / (a + theta.cos());
    let lap_r = assemble_flux_laplacian(grid, WallClosure::Robin, Some(&robin));
    let lap_t = assemble_flux_laplacian(grid, WallClosure::Dirichlet, None);

    let mut m = DMatrix::<f64>::zeros(2 * n, 2 * n);
    for p in 0..n {
        for q in 0..n {
            m[(p, q)] = lap_r[(p, q)];
            m[(n + p, n + q)] = lap_t[(p, q)];
        }
    }
    // Diagonal curvature terms.
    for i in 0..grid.n_r {
        for j in 0..grid.n_theta {
            let p = grid.idx(i, j);
            let (st, ct) = grid.theta[j].sin_cos();
            let rr = grid.big_r[p];
            let ri = grid.r[i];
            m[(p, p)] -= 1.0 / (ri * ri) + (ct * ct) / (rr * rr);
            m[(n + p, n + p)] -= 1.0 / (ri * ri) + (st * st) / (rr * rr);
        }
    }
    // r-theta coupling: C h_theta = -(2/r^2) d_theta h_theta
    //                              + [sin/(r R) + cos sin / R^2] h_theta.
    let mut c = DMatrix::<f64>::zeros(n, n);
    for i in 0..grid.n_r {
        for j in 0..grid.n_theta {
            let p = grid.idx(i, j);
            let (st, ct) = grid.theta[j].sin_cos();
            let rr = grid.big_r[p];
            let ri = grid.r[i];
            let jp = grid.idx(i, (j + 1) % grid.n_theta);
            let jm = grid.idx(i, (j + grid.n_theta - 1) % grid.n_theta);
            let k = 2.0 / (ri * ri) / (2.0 * grid.dtheta);
            c[(p, jp)] -= k;
            c[(p, jm)] += k;
            c[(p, p)] += st / (ri * rr) + ct * st / (rr * rr);
        }
    }
    // The continuum theta-r block is the w-adjoint of the r-theta block;
    // impose that exactly on the discretization.
    for p in 0..n {
        for q in 0..n {
            m[(p, n + q)] = c[(p, q)];
            m[(n + q, p)] = grid.w[p] * c[(p, q)] / grid.w[q];
        }
    }
    m
}

/// Metric transpose `W^{-1} M^T W` for a block-diagonal weight built by
/// repeating the grid weights over `blocks` components.
pub fn metric_transpose(m: &DMatrix<f64>, grid: &CrossSectionGrid, blocks: usize) -> DMatrix<f64> {
    let n = grid.len();
    assert_eq!(m.nrows(), n * blocks);
    assert_eq!(m.ncols(), n * blocks);
    let mut t = m.transpose();
    for p in 0..n * blocks {
        for q in 0..n * blocks {
            t[(p, q)] *= grid.w[q % n] / grid.w[p % n];
        }
    }
    t
}

/// Symmetrize `M` in the w-metric; returns the symmetric part and the
/// relative asymmetry `|M - M^T_w| / |M|` (Frobenius).
pub fn symmetrize_in_metric(
    m: &DMatrix<f64>,
    grid: &CrossSectionGrid,
    blocks: usize,
) -> (DMatrix<f64>, f64) {
    let t = metric_transpose(m, grid, blocks);
    let sym = 0.5 * (m + &t);
    let asym = 0.5 * (m - &t);
    let rel = asym.norm() / sym.norm().max(1e-300);
    (sym, rel)
}

/// Cholesky solver for operators that are symmetric positive definite in the
/// w-metric: factors `W^{1/2} M W^{-1/2}` once and solves `M x = b` quickly.
pub struct WSolver {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    sqrt_w: Vec<f64>,
}

impl WSolver {
    /// `m` must satisfy `W M = M^T W` and be positive definite in that metric.
    pub fn new(m: &DMatrix<f64>, grid: &CrossSectionGrid, blocks: usize) -> Result<Self> {
        let n = grid.len() * blocks;
        assert_eq!(m.nrows(), n);
        let sqrt_w: Vec<f64> = (0..n).map(|k| grid.w[k % grid.len()].sqrt()).collect();
        let mut s = m.clone();
        for p in 0..n {
            for q in 0..n {
                s[(p, q)] *= sqrt_w[p] / sqrt_w[q];
            }
        }
        let s = 0.5 * (&s + s.transpose());
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::Linalg("operator not positive definite in the w-metric".into()))?;
        Ok(Self { chol, sqrt_w })
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut y = b.clone();
        for (k, v) in y.iter_mut().enumerate() {
            *v *= self.sqrt_w[k];
        }
        let mut x = self.chol.solve(&y);
        for (k, v) in x.iter_mut().enumerate() {
            *v /= self.sqrt_w[k];
        }
        x
    }
}

// ---------------------------------------------------------------------------
// Velocity-space quadrature
// ---------------------------------------------------------------------------

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Initial guess (Tricomi) followed by Newton on P_n.
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_deriv(n, z);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        let (_, dp) = legendre_with_deriv(n, z);
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn legendre_with_deriv(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Decay metadata of a profile, used for truncation-tail estimates:
/// `|mu| + |mu_p| + |mu_e| <= c_mu / (1 + |e|^gamma)`.
#[derive(Debug, Clone, Copy)]
pub struct DecayBound {
    pub c_mu: f64,
    pub gamma: f64,
}

/// Tensor-product velocity quadrature over `[-v_max, v_max]^3` in the
/// components `(v_r, v_theta, v_phi)`.
///
/// Node placement is symmetric under negation of any component, so odd
/// integrands cancel to roundoff.
#[derive(Debug, Clone)]
pub struct VelocityQuadrature {
    pub v_max: f64,
    /// `(v_r, v_theta, v_phi)` nodes.
    pub nodes: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

/// Symmetric 1D quadrature axis on `[-v_max, v_max]`.
fn symmetric_axis(v_max: f64, n: usize, paneled: bool) -> (Vec<f64>, Vec<f64>) {
    if !paneled {
        let (x, w) = gauss_legendre(n);
        return (
            x.iter().map(|&t| t * v_max).collect(),
            w.iter().map(|&t| t * v_max).collect(),
        );
    }
    // Geometric panels resolve integrands concentrated near the origin while
    // still reaching the cutoff: [0,1], then growth by 1.5 up to v_max.
    let mut edges = vec![0.0];
    let mut e = 1.0_f64.min(v_max);
    while e < v_max {
        edges.push(e);
        e *= 1.5;
    }
    edges.push(v_max);
    let (x, w) = gauss_legendre(n);
    let mut nodes = Vec::new();
    let mut weights = Vec::new();
    for p in 0..edges.len() - 1 {
        let (lo, hi) = (edges[p], edges[p + 1]);
        let mid = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo);
        for (xi, wi) in x.iter().zip(&w) {
            let v = mid + half * xi;
            nodes.push(v);
            weights.push(wi * half);
            nodes.push(-v);
            weights.push(wi * half);
        }
    }
    (nodes, weights)
}

impl VelocityQuadrature {
    /// Plain Gauss-Legendre tensor rule: `n_perp` nodes on each poloidal
    /// component, `n_phi` on the toroidal one.
    pub fn tensor(v_max: f64, n_perp: usize, n_phi: usize) -> Result<Self> {
        Self::build(v_max, n_perp, n_phi, false)
    }

    /// Composite tensor rule with geometric panels per axis (`n_*` nodes per
    /// panel); resolves exponentially localized integrands on wide cutoffs.
    pub fn composite(v_max: f64, n_perp: usize, n_phi: usize) -> Result<Self> {
        Self::build(v_max, n_perp, n_phi, true)
    }

    fn build(v_max: f64, n_perp: usize, n_phi: usize, paneled: bool) -> Result<Self> {
        if v_max <= 0.0 || n_perp == 0 || n_phi == 0 {
            return Err(Error::Geometry("invalid velocity quadrature parameters".into()));
        }
        let (xp, wp) = symmetric_axis(v_max, n_perp, paneled);
        let (xf, wf) = symmetric_axis(v_max, n_phi, paneled);
        let mut nodes = Vec::with_capacity(xp.len() * xp.len() * xf.len());
        let mut weights = Vec::with_capacity(nodes.capacity());
        for (i, &vr) in xp.iter().enumerate() {
            for (j, &vt) in xp.iter().enumerate() {
                for (k, &vf) in xf.iter().enumerate() {
                    nodes.push([vr, vt, vf]);
                    weights.push(wp[i] * wp[j] * wf[k]);
                }
            }
        }
        Ok(Self { v_max, nodes, weights })
    }

    /// Reduced rule for integrands invariant under rotations of the poloidal
    /// velocity: nodes are `(s, 0, v_phi)` with `s = |v_poloidal|` and the
    /// angular factor `2 pi s` folded into the weights. Only valid when the
    /// integrand depends on `v` through `(|v_poloidal|, v_phi)`.
    pub fn polar_reduced(v_max: f64, n_s: usize, n_phi: usize) -> Result<Self> {
        if v_max <= 0.0 || n_s == 0 || n_phi == 0 {
            return Err(Error::Geometry("invalid velocity quadrature parameters".into()));
        }
        let (xf, wf) = symmetric_axis(v_max, n_phi, true);
        // radial axis: positive part of a paneled symmetric axis
        let (xs_full, ws_full) = symmetric_axis(v_max, n_s, true);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for (i, &s) in xs_full.iter().enumerate() {
            if s <= 0.0 {
                continue;
            }
            for (k, &vf) in xf.iter().enumerate() {
                nodes.push([s, 0.0, vf]);
                weights.push(std::f64::consts::TAU * s * ws_full[i] * wf[k]);
            }
        }
        Ok(Self { v_max, nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Integrate `f(v)` over the truncated ball.
    pub fn integrate(&self, mut f: impl FnMut(&[f64; 3]) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(v, w)| w * f(v)).sum()
    }
}

/// Truncated velocity integral with a decay-based tail estimate.
///
/// The estimate integrates the profile bound `c_mu / (1 + e^gamma)` over
/// `|v| > v_max`; a tail larger than `tol` (relative to the computed value)
/// is reported through the `tail_warning` flag.
pub struct VelocityIntegral {
    pub value: f64,
    pub tail_estimate: f64,
    pub tail_warning: bool,
}

pub fn velocity_integrate(
    rule: &VelocityQuadrature,
    decay: Option<DecayBound>,
    tol: f64,
    f: impl FnMut(&[f64; 3]) -> f64,
) -> VelocityIntegral {
    let value = rule.integrate(f);
    let tail_estimate = decay.map(|d| decay_tail(d, rule.v_max)).unwrap_or(0.0);
    let tail_warning = tail_estimate > tol * value.abs().max(f64::MIN_POSITIVE);
    VelocityIntegral { value, tail_estimate, tail_warning }
}

/// `4 pi c_mu \int_{v_max}^infty s^2 / (1 + <s>^gamma) ds` by midpoint
/// quadrature on a mapped semi-infinite interval.
pub fn decay_tail(decay: DecayBound, v_max: f64) -> f64 {
    let n = 400;
    let mut sum = 0.0;
    // substitute s = v_max / t, t in (0, 1]
    for k in 0..n {
        let t = (k as f64 + 0.5) / n as f64;
        let s = v_max / t;
        let ds = v_max / (t * t) / n as f64;
        let e = (1.0 + s * s).sqrt();
        sum += s * s / (1.0 + e.powf(decay.gamma)) * ds;
    }
    4.0 * std::f64::consts::PI * decay.c_mu * sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn grid(a: f64, nr: usize, nt: usize) -> CrossSectionGrid {
        CrossSectionGrid::new(ToroidalFrame::new(a).unwrap(), nr, nt).unwrap()
    }

    #[test]
    fn frame_rejects_bad_major_radius() {
        assert!(ToroidalFrame::new(1.0).is_err());
        assert!(ToroidalFrame::new(0.5).is_err());
        assert!(ToroidalFrame::new(f64::NAN).is_err());
    }

    #[test]
    fn basis_is_orthonormal_right_handed() {
        let f = ToroidalFrame::new(2.3).unwrap();
        for &(t, p) in &[(0.3, 1.2), (2.9, 4.0), (5.5, 0.1)] {
            let [er, et, ep] = f.basis(t, p);
            let dot = |x: &[f64; 3], y: &[f64; 3]| x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
            assert!((dot(&er, &er) - 1.0).abs() < 1e-14);
            assert!((dot(&et, &et) - 1.0).abs() < 1e-14);
            assert!((dot(&ep, &ep) - 1.0).abs() < 1e-14);
            assert!(dot(&er, &et).abs() < 1e-14);
            // e_phi x e_theta = e_r
            let cross = [
                ep[1] * et[2] - ep[2] * et[1],
                ep[2] * et[0] - ep[0] * et[2],
                ep[0] * et[1] - ep[1] * et[0],
            ];
            for k in 0..3 {
                assert!((cross[k] - er[k]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn volume_converges_to_torus_volume() {
        let a = 2.0;
        let exact = 2.0 * std::f64::consts::PI.powi(2) * a;
        let v1 = grid(a, 16, 32).volume();
        let v2 = grid(a, 32, 64).volume();
        assert!((v1 - exact).abs() / exact < 2e-3, "coarse volume off: {v1} vs {exact}");
        assert!((v2 - exact).abs() / exact < 5e-4, "fine volume off: {v2} vs {exact}");
    }

    #[test]
    fn inner_product_constant_gives_volume() {
        let g = grid(2.0, 24, 48);
        let ones = vec![1.0; g.len()];
        let ip = weighted_inner_product(&ones, &ones, &g).unwrap();
        let exact = 2.0 * std::f64::consts::PI.powi(2) * 2.0;
        assert!((ip - exact).abs() / exact < 1e-3);
    }

    #[test]
    fn inner_product_positive_definite_and_shape_checked() {
        let g = grid(1.5, 8, 16);
        let mut h = vec![0.0; g.len()];
        assert_eq!(weighted_inner_product(&h, &h, &g).unwrap(), 0.0);
        h[5] = -0.3;
        assert!(weighted_inner_product(&h, &h, &g).unwrap() > 0.0);
        let short = vec![1.0; 3];
        assert!(weighted_inner_product(&short, &h, &g).is_err());
    }

    #[test]
    fn inner_product_cos_theta_matches_quadrature_oracle() {
        // oracle: adaptive-style fine 2D midpoint quadrature of
        // 2 pi r (a + r cos) cos over the disk
        let a = 2.0;
        let oracle = {
            let (nr, nt) = (2000, 2000);
            let mut s = 0.0;
            for i in 0..nr {
                let r = (i as f64 + 0.5) / nr as f64;
                for j in 0..nt {
                    let t = (j as f64 + 0.5) / nt as f64 * std::f64::consts::TAU;
                    s += r * (a + r * t.cos()) * t.cos();
                }
            }
            s * std::f64::consts::TAU / (nr as f64 * nt as f64) * std::f64::consts::TAU
        };
        let g = grid(a, 48, 96);
        let f: Vec<f64> = (0..g.len()).map(|k| g.theta[k % g.n_theta].cos()).collect();
        let ones = vec![1.0; g.len()];
        let ip = weighted_inner_product(&f, &ones, &g).unwrap();
        assert!((ip - oracle).abs() < 2e-3 * oracle.abs(), "got {ip}, oracle {oracle}");
    }

    #[test]
    fn laplacian_symmetric_in_w_metric() {
        let g = grid(1.7, 10, 20);
        for shifted in [false, true] {
            let m = assemble_scalar_laplacian(&g, shifted).unwrap();
            let (_, asym) = symmetrize_in_metric(&m, &g, 1);
            assert!(asym < 1e-13, "asymmetry {asym}");
        }
    }

    #[test]
    fn laplacian_negative_definite_on_dirichlet_functions() {
        let g = grid(2.0, 12, 24);
        let m = assemble_scalar_laplacian(&g, false).unwrap();
        let ones = DVector::from_element(g.len(), 1.0);
        let q = -weighted_inner_product((&m * &ones).as_slice(), ones.as_slice(), &g).unwrap();
        // constant with zero wall extension: only the boundary layer contributes
        assert!(q > 0.0);
        // random-ish oscillating function
        let h = DVector::from_fn(g.len(), |k, _| ((k * 37 % 11) as f64 - 5.0) / 5.0);
        let q2 = -weighted_inner_product((&m * &h).as_slice(), h.as_slice(), &g).unwrap();
        assert!(q2 > 0.0);
    }

    #[test]
    fn shifted_form_difference_is_curvature_weight() {
        let g = grid(2.5, 10, 20);
        let m0 = assemble_scalar_laplacian(&g, false).unwrap();
        let m1 = assemble_scalar_laplacian(&g, true).unwrap();
        let h = DVector::from_fn(g.len(), |k, _| (k as f64 * 0.37).sin());
        let d0 = weighted_inner_product((&m0 * &h).as_slice(), h.as_slice(), &g).unwrap();
        let d1 = weighted_inner_product((&m1 * &h).as_slice(), h.as_slice(), &g).unwrap();
        let expect: f64 = (0..g.len()).map(|k| g.w[k] * h[k] * h[k] / (g.big_r[k] * g.big_r[k])).sum();
        assert!(((d0 - d1) - expect).abs() < 1e-10 * expect.abs().max(1.0));
    }

    /// Dense eigensolve oracle: smallest Dirichlet eigenvalue of -Delta at
    /// large aspect ratio tends to the squared first Bessel zero.
    #[test]
    fn large_aspect_ratio_recovers_disk_ground_eigenvalue() {
        let g = grid(1e3, 48, 8);
        let m = assemble_scalar_laplacian(&g, false).unwrap();
        let lam = smallest_eigenvalue_wmetric(&(-m), &g);
        let j01_sq = 5.783185962946785;
        assert!(
            (lam - j01_sq).abs() / j01_sq < 0.01,
            "ground eigenvalue {lam} vs Bessel {j01_sq}"
        );
    }

    #[test]
    fn refinement_moves_ground_eigenvalue_less_than_one_percent() {
        let a = 2.0;
        let coarse = grid(a, 12, 24);
        let fine = grid(a, 24, 48);
        let mc = assemble_scalar_laplacian(&coarse, false).unwrap();
        let mf = assemble_scalar_laplacian(&fine, false).unwrap();
        let lc = smallest_eigenvalue_wmetric(&(-mc), &coarse);
        let lf = smallest_eigenvalue_wmetric(&(-mf), &fine);
        assert!((lc - lf).abs() / lf < 0.01, "coarse {lc} vs fine {lf}");
    }

    pub(crate) fn smallest_eigenvalue_wmetric(m: &DMatrix<f64>, g: &CrossSectionGrid) -> f64 {
        // similarity transform with W^{1/2} makes the operator symmetric
        let n = g.len();
        let mut s = m.clone();
        for p in 0..n {
            for q in 0..n {
                s[(p, q)] *= (g.w[p] / g.w[q]).sqrt();
            }
        }
        let s = 0.5 * (&s + s.transpose());
        let eig = s.symmetric_eigenvalues();
        eig.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn vector_laplacian_symmetric_and_divergence_small_on_gradient_free_field() {
        let g = grid(2.0, 8, 16);
        let m = assemble_vector_laplacian(&g);
        let (_, asym) = symmetrize_in_metric(&m, &g, 2);
        assert!(asym < 1e-13, "vector Laplacian asymmetry {asym}");
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(8);
        // degree-15 polynomial must be exact
        let val: f64 = x.iter().zip(&w).map(|(&xi, &wi)| wi * xi.powi(14)).sum();
        let exact = 2.0 / 15.0;
        assert!((val - exact).abs() < 1e-12);
        let odd: f64 = x.iter().zip(&w).map(|(&xi, &wi)| wi * xi.powi(7)).sum();
        assert!(odd.abs() < 1e-14);
    }

    #[test]
    fn velocity_quadrature_symmetric_under_vr_negation() {
        let q = VelocityQuadrature::tensor(8.0, 6, 8).unwrap();
        let even = q.integrate(|v| (v[0] * v[0] + 0.3 * v[2]).cos() * (-v[1] * v[1]).exp());
        let flipped = q.integrate(|v| ((-v[0]) * (-v[0]) + 0.3 * v[2]).cos() * (-v[1] * v[1]).exp());
        assert_eq!(even, flipped);
        let odd = q.integrate(|v| v[0] * (-(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])).exp());
        assert!(odd.abs() < 1e-14);
    }

    #[test]
    fn velocity_quadrature_polynomials_match_oracle() {
        let vm: f64 = 3.0;
        let q = VelocityQuadrature::tensor(vm, 6, 6).unwrap();
        // integrand v_r^2 v_phi^4 over the cube: product of 1D moments
        let got = q.integrate(|v| v[0] * v[0] * v[2].powi(4));
        let m2 = 2.0 * vm.powi(3) / 3.0;
        let m4 = 2.0 * vm.powi(5) / 5.0;
        let m0 = 2.0 * vm;
        let exact = m2 * m0 * m4;
        assert!((got - exact).abs() / exact < 1e-10);
    }

    #[test]
    fn exponential_moment_matches_radial_oracle() {
        // oracle: 1D adaptive-style Simpson of 4 pi s^2 exp(-sqrt(1+s^2))
        let oracle = {
            let n = 200_000;
            let smax = 40.0;
            let h = smax / n as f64;
            let f = |s: f64| s * s * (-(1.0 + s * s).sqrt()).exp();
            let mut acc = f(0.0) + f(smax);
            for k in 1..n {
                acc += f(k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
            }
            4.0 * std::f64::consts::PI * acc * h / 3.0
        };
        let q = VelocityQuadrature::composite(30.0, 8, 8).unwrap();
        let got = q.integrate(|v| {
            (-(1.0 + v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()).exp()
        });
        assert!((got - oracle).abs() / oracle < 1e-8, "got {got}, oracle {oracle}");
        // the reduced polar rule agrees for this rotation-invariant integrand
        let qp = VelocityQuadrature::polar_reduced(30.0, 8, 8).unwrap();
        let got_p = qp.integrate(|v| {
            (-(1.0 + v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()).exp()
        });
        assert!((got_p - oracle).abs() / oracle < 1e-8, "polar {got_p}, oracle {oracle}");
    }

    #[test]
    fn tail_warning_fires_when_cutoff_too_small() {
        let q = VelocityQuadrature::tensor(2.0, 4, 4).unwrap();
        let decay = DecayBound { c_mu: 1.0, gamma: 4.0 };
        let out = velocity_integrate(&q, Some(decay), 1e-8, |v| {
            1.0 / (1.0 + (1.0 + v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().powi(4))
        });
        assert!(out.tail_warning);
        assert!(out.tail_estimate > 0.0);
    }

    #[test]
    fn stencil_interpolation_reproduces_bilinear_functions() {
        let g = grid(2.0, 16, 32);
        // f linear in (y1, y2) = (r cos, r sin) is reproduced by the stencil
        // away from the wall and the center patch.
        let f: Vec<f64> = (0..g.len())
            .map(|k| {
                let (i, j) = (k / g.n_theta, k % g.n_theta);
                1.3 + 0.4 * g.r[i] * g.theta[j].cos() - 0.7 * g.r[i] * g.theta[j].sin()
            })
            .collect();
        for &(r, t) in &[(0.31, 0.7), (0.62, 3.4), (0.5, 5.9)] {
            let got = g.interp_clamped(&f, r, t);
            let exact = 1.3 + 0.4 * r * t.cos() - 0.7 * r * t.sin();
            assert!((got - exact).abs() < 5e-3, "at ({r},{t}): {got} vs {exact}");
        }
    }
}
