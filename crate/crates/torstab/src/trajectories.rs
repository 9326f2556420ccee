//! Equilibrium characteristics with specular wall reflection, and the two
//! averages taken along them: the exponentially weighted backward average
//! `Q_lambda` and the long-time (ergodic) average realizing the kernel
//! projection.
//!
//! The integrator works in cylindrical cross-section coordinates
//! `(y1, y2) = (R - a, z)` with velocity components `(v_R, v_phi, v_z)`;
//! these are free of the polar coordinate singularity at the cross-section
//! center, and the torus wall is simply `y1^2 + y2^2 = 1`. Specular
//! reflection flips the component of the velocity along the cross-section
//! normal and leaves `v_phi` alone, so both particle invariants survive each
//! bounce exactly.

use crate::equilibrium::Equilibrium;
use crate::profiles::Species;
use crate::{Error, Result};

/// Phase point in toroidal components, the public face of the integrator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseState {
    pub r: f64,
    pub theta: f64,
    pub v_r: f64,
    pub v_theta: f64,
    pub v_phi: f64,
}

/// Phase point in the cylindrical components the integrator advances.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhasePoint {
    pub y1: f64,
    pub y2: f64,
    pub v_big_r: f64,
    pub v_phi: f64,
    pub v_z: f64,
}

impl PhaseState {
    pub fn to_point(&self) -> PhasePoint {
        let (st, ct) = self.theta.sin_cos();
        PhasePoint {
            y1: self.r * ct,
            y2: self.r * st,
            v_big_r: self.v_r * ct - self.v_theta * st,
            v_phi: self.v_phi,
            v_z: self.v_r * st + self.v_theta * ct,
        }
    }
}

impl PhasePoint {
    #[inline]
    pub fn r(&self) -> f64 {
        (self.y1 * self.y1 + self.y2 * self.y2).sqrt()
    }

    #[inline]
    pub fn theta(&self) -> f64 {
        self.y2.atan2(self.y1)
    }

    /// Velocity in the `(e_r, e_theta, e_phi)` frame at the point.
    #[inline]
    pub fn v_polar(&self) -> [f64; 3] {
        let r = self.r().max(1e-300);
        let (ct, st) = (self.y1 / r, self.y2 / r);
        [
            self.v_big_r * ct + self.v_z * st,
            -self.v_big_r * st + self.v_z * ct,
            self.v_phi,
        ]
    }

    pub fn to_state(&self) -> PhaseState {
        let v = self.v_polar();
        PhaseState { r: self.r(), theta: self.theta(), v_r: v[0], v_theta: v[1], v_phi: self.v_phi }
    }

    #[inline]
    pub fn gamma(&self) -> f64 {
        (1.0 + self.v_big_r * self.v_big_r + self.v_phi * self.v_phi + self.v_z * self.v_z).sqrt()
    }

    /// Radial velocity component (along the cross-section normal).
    #[inline]
    fn v_wall_normal(&self) -> f64 {
        let r = self.r().max(1e-300);
        (self.v_big_r * self.y1 + self.v_z * self.y2) / r
    }

    /// Time-reversal map: flips the poloidal velocity.
    #[inline]
    pub fn time_reversed(&self) -> Self {
        Self { v_big_r: -self.v_big_r, v_z: -self.v_z, ..*self }
    }

    /// Specular wall reflection at the current position.
    #[inline]
    fn reflected(&self) -> Self {
        let r = self.r().max(1e-300);
        let vn = self.v_wall_normal();
        Self {
            v_big_r: self.v_big_r - 2.0 * vn * self.y1 / r,
            v_z: self.v_z - 2.0 * vn * self.y2 / r,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IntegrateOptions {
    pub dt: f64,
    /// wall-location tolerance for the event bisection
    pub wall_tol: f64,
    /// below this normal speed a bounce is flagged degenerate and the
    /// trajectory is truncated (grazing collisions carry zero measure)
    pub grazing_tol: f64,
    /// trajectories exceeding this many bounces are flagged
    pub bounce_cap: usize,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self { dt: 1e-3, wall_tol: 1e-12, grazing_tol: 1e-10, bounce_cap: 1_000_000 }
    }
}

#[inline]
fn rhs(eq: &Equilibrium, sign: f64, p: &PhasePoint) -> [f64; 5] {
    let gamma = p.gamma();
    let big_r = eq.grid.frame.a + p.y1;
    let f = eq.fields_at(p.y1, p.y2);
    let (vr_hat, vp_hat, vz_hat) = (p.v_big_r / gamma, p.v_phi / gamma, p.v_z / gamma);
    [
        vr_hat,
        vz_hat,
        sign * (f.e_big_r + vp_hat * f.b_z) + p.v_phi * vp_hat / big_r,
        sign * (vz_hat * f.b_big_r - vr_hat * f.b_z) - p.v_big_r * vp_hat / big_r,
        sign * (f.e_z - vp_hat * f.b_big_r),
    ]
}

#[inline]
fn rk4_step(eq: &Equilibrium, sign: f64, p: &PhasePoint, h: f64) -> PhasePoint {
    let add = |p: &PhasePoint, k: &[f64; 5], s: f64| PhasePoint {
        y1: p.y1 + s * k[0],
        y2: p.y2 + s * k[1],
        v_big_r: p.v_big_r + s * k[2],
        v_phi: p.v_phi + s * k[3],
        v_z: p.v_z + s * k[4],
    };
    let k1 = rhs(eq, sign, p);
    let k2 = rhs(eq, sign, &add(p, &k1, 0.5 * h));
    let k3 = rhs(eq, sign, &add(p, &k2, 0.5 * h));
    let k4 = rhs(eq, sign, &add(p, &k3, h));
    PhasePoint {
        y1: p.y1 + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        y2: p.y2 + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        v_big_r: p.v_big_r + h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
        v_phi: p.v_phi + h / 6.0 * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3]),
        v_z: p.v_z + h / 6.0 * (k1[4] + 2.0 * k2[4] + 2.0 * k3[4] + k4[4]),
    }
}

/// Outcome summary of a walk along one trajectory.
#[derive(Debug, Clone, Copy, Default)]
pub struct WalkSummary {
    pub bounces: usize,
    pub degenerate: bool,
    /// time actually covered (shorter than requested only when degenerate)
    pub covered: f64,
}

/// Integrate forward from `start` for `horizon`, invoking `visit(u, point)`
/// at `u = 0, dt, 2 dt, ...` (every accepted step). Bounces are located by
/// bisection and the specular reflection applied in place.
pub fn walk_forward(
    eq: &Equilibrium,
    species: Species,
    start: &PhasePoint,
    horizon: f64,
    opts: &IntegrateOptions,
    mut visit: impl FnMut(f64, &PhasePoint),
) -> WalkSummary {
    let sign = species.sign();
    let mut p = *start;
    let mut out = WalkSummary::default();
    // a seed sitting on the wall moving outward reflects immediately
    if p.r() >= 1.0 - 1e-9 && p.v_wall_normal() > 0.0 {
        p = p.reflected();
    }
    let mut u = 0.0;
    visit(0.0, &p);
    let n_steps = (horizon / opts.dt).round() as usize;
    for _ in 0..n_steps {
        let mut remaining = opts.dt;
        let mut guard = 0;
        loop {
            let next = rk4_step(eq, sign, &p, remaining);
            if next.r() <= 1.0 {
                p = next;
                break;
            }
            // locate the crossing within the substep by bisection
            let mut lo = 0.0;
            let mut hi = remaining;
            let mut hit = next;
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                let trial = rk4_step(eq, sign, &p, mid);
                if trial.r() > 1.0 {
                    hi = mid;
                    hit = trial;
                } else {
                    lo = mid;
                    hit = trial;
                }
                if (hit.r() - 1.0).abs() < opts.wall_tol {
                    break;
                }
            }
            let alpha = 0.5 * (lo + hi);
            if hit.v_wall_normal().abs() < opts.grazing_tol {
                out.degenerate = true;
                out.covered = u;
                return out;
            }
            p = hit.reflected();
            out.bounces += 1;
            if out.bounces > opts.bounce_cap {
                out.degenerate = true;
                out.covered = u;
                return out;
            }
            remaining -= alpha;
            guard += 1;
            if guard > 64 {
                out.degenerate = true;
                out.covered = u;
                return out;
            }
            if remaining <= 0.0 {
                break;
            }
        }
        u += opts.dt;
        visit(u, &p);
    }
    out.covered = u;
    out
}

/// Integrate the backward trajectory `Phi_{-u}` via the time-reversal
/// identity: run forward from the reversed seed and reverse each sample.
pub fn walk_backward(
    eq: &Equilibrium,
    species: Species,
    seed: &PhasePoint,
    horizon: f64,
    opts: &IntegrateOptions,
    mut visit: impl FnMut(f64, &PhasePoint),
) -> WalkSummary {
    walk_forward(eq, species, &seed.time_reversed(), horizon, opts, |u, p| {
        visit(u, &p.time_reversed())
    })
}

/// Reflected-characteristic samples from one seed.
pub struct TrajectoryCache {
    pub seed: PhaseState,
    pub species: Species,
    /// sample spacing in time; sample `k` sits at `s_k = -k dt_sample`
    pub dt_sample: f64,
    /// backward-time states `Phi_{s_k}(seed)`
    pub samples: Vec<PhasePoint>,
    pub bounces: usize,
    pub degenerate: bool,
    pub horizon: f64,
}

/// Integrate the reflected characteristic backward in time and cache samples
/// every `sample_stride` steps.
pub fn integrate_reflecting(
    eq: &Equilibrium,
    species: Species,
    seed: &PhaseState,
    horizon: f64,
    opts: &IntegrateOptions,
    sample_stride: usize,
) -> Result<TrajectoryCache> {
    if seed.r > 1.0 || seed.r < 0.0 {
        return Err(Error::OutsideDomain(seed.r));
    }
    let stride = sample_stride.max(1);
    let mut samples = Vec::with_capacity((horizon / opts.dt) as usize / stride + 2);
    let mut count = 0usize;
    let summary = walk_backward(eq, species, &seed.to_point(), horizon, opts, |_, p| {
        if count % stride == 0 {
            samples.push(*p);
        }
        count += 1;
    });
    Ok(TrajectoryCache {
        seed: *seed,
        species,
        dt_sample: opts.dt * stride as f64,
        samples,
        bounces: summary.bounces,
        degenerate: summary.degenerate,
        horizon: summary.covered,
    })
}

/// Result of an exponentially weighted backward average.
#[derive(Debug, Clone, Copy)]
pub struct QAverage {
    pub value: f64,
    /// weight remaining beyond the horizon, completed by the running mean
    pub tail_weight: f64,
    /// true when the horizon is short of the `40 / lambda` guideline
    pub tail_warning: bool,
}

impl TrajectoryCache {
    /// Evaluate `g` on the cached samples.
    pub fn sample_values(&self, mut g: impl FnMut(&PhasePoint) -> f64) -> Vec<f64> {
        self.samples.iter().map(|p| g(p)).collect()
    }

    /// Exponential average `int_0^inf lambda e^{-lambda u} g(Phi_{-u}) du`
    /// from the cached values, exact per sample interval for linear-in-time
    /// integrands; the truncated tail is completed with the running mean, so
    /// the average of `g = 1` is exactly 1.
    pub fn q_lambda_values(&self, lambda: f64, values: &[f64]) -> QAverage {
        q_lambda_from_samples(lambda, self.dt_sample, values, self.horizon)
    }

    /// Uniform (ergodic) average of the cached values with a halving
    /// diagnostic: the relative gap between the half-horizon and full-horizon
    /// averages.
    pub fn ergodic_values(&self, values: &[f64]) -> (f64, f64) {
        ergodic_from_samples(values)
    }
}

pub fn q_lambda_from_samples(lambda: f64, dt: f64, values: &[f64], horizon: f64) -> QAverage {
    assert!(lambda > 0.0);
    if values.is_empty() {
        return QAverage { value: 0.0, tail_weight: 1.0, tail_warning: true };
    }
    let mut acc = 0.0;
    let mut running = 0.0;
    let decay = (-lambda * dt).exp();
    let mut w_lo = 1.0; // e^{-lambda u_k}
    // piecewise-linear-exact exponential quadrature
    let lam_dt = lambda * dt;
    for k in 0..values.len() - 1 {
        let w_hi = w_lo * decay;
        let i0 = w_lo - w_hi;
        let i1 = (w_lo - w_hi * (1.0 + lam_dt)) / lam_dt;
        acc += values[k] * (i0 - i1) + values[k + 1] * i1;
        running += 0.5 * (values[k] + values[k + 1]);
        w_lo = w_hi;
    }
    let mean = if values.len() > 1 {
        running / (values.len() - 1) as f64
    } else {
        values[0]
    };
    let tail = w_lo;
    QAverage {
        value: acc + tail * mean,
        tail_weight: tail,
        tail_warning: lambda * horizon < 40.0,
    }
}

pub fn ergodic_from_samples(values: &[f64]) -> (f64, f64) {
    if values.len() < 4 {
        let v = values.iter().sum::<f64>() / values.len().max(1) as f64;
        return (v, f64::INFINITY);
    }
    let trapezoid = |vals: &[f64]| -> f64 {
        let inner: f64 = vals[1..vals.len() - 1].iter().sum();
        (inner + 0.5 * (vals[0] + vals[vals.len() - 1])) / (vals.len() - 1) as f64
    };
    let full = trapezoid(values);
    let half = trapezoid(&values[..values.len() / 2]);
    let gap = (full - half).abs() / full.abs().max(1e-12);
    (full, gap)
}

/// One-shot exponential backward average of a phase function.
pub fn q_lambda_average(
    eq: &Equilibrium,
    species: Species,
    seed: &PhaseState,
    lambda: f64,
    horizon: f64,
    opts: &IntegrateOptions,
    mut g: impl FnMut(&PhasePoint) -> f64,
) -> Result<QAverage> {
    if lambda <= 0.0 {
        return Err(Error::Domain(format!("exponential average needs lambda > 0, got {lambda}")));
    }
    let cache = integrate_reflecting(eq, species, seed, horizon, opts, 1)?;
    let values = cache.sample_values(&mut g);
    Ok(cache.q_lambda_values(lambda, &values))
}

/// One-shot ergodic (forward-time uniform) average of a phase function;
/// returns `(average, halving diagnostic)`.
pub fn ergodic_average(
    eq: &Equilibrium,
    species: Species,
    seed: &PhaseState,
    horizon: f64,
    opts: &IntegrateOptions,
    mut g: impl FnMut(&PhasePoint) -> f64,
) -> Result<(f64, f64)> {
    if seed.r > 1.0 || seed.r < 0.0 {
        return Err(Error::OutsideDomain(seed.r));
    }
    let mut values = Vec::with_capacity((horizon / opts.dt) as usize + 1);
    walk_forward(eq, species, &seed.to_point(), horizon, opts, |_, p| values.push(g(p)));
    Ok(ergodic_from_samples(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CrossSectionGrid, ToroidalFrame};
    use crate::profiles::{MuProfile, ProfileFamily};

    fn vacuum_eq(a: f64) -> Equilibrium {
        let g = CrossSectionGrid::new(ToroidalFrame::new(a).unwrap(), 8, 16).unwrap();
        let prof = MuProfile::with_default_decay(ProfileFamily::Vacuum, a).unwrap();
        Equilibrium::vacuum(&g, prof)
    }

    /// Strong prescribed fields (not self-consistent): trajectory invariants
    /// hold for any smooth potentials.
    fn magnetic_eq(a: f64) -> Equilibrium {
        let g = CrossSectionGrid::new(ToroidalFrame::new(a).unwrap(), 16, 32).unwrap();
        let prof = MuProfile::with_default_decay(ProfileFamily::Vacuum, a).unwrap();
        let phi: Vec<f64> = (0..g.len())
            .map(|k| {
                let (i, j) = (k / g.n_theta, k % g.n_theta);
                let (r, t) = (g.r[i], g.theta[j]);
                0.2 * (1.0 - r * r) * (1.0 + 0.4 * t.cos() - 0.2 * (2.0 * t).sin())
            })
            .collect();
        let a_phi: Vec<f64> = (0..g.len())
            .map(|k| {
                let (i, j) = (k / g.n_theta, k % g.n_theta);
                let (r, t) = (g.r[i], g.theta[j]);
                0.15 * (1.0 - r * r) * (1.0 + 0.3 * t.sin())
            })
            .collect();
        Equilibrium::from_potentials(&g, prof, phi, a_phi).unwrap()
    }

    #[test]
    fn free_flight_with_zero_toroidal_velocity_is_straight() {
        let eq = vacuum_eq(2.0);
        let seed =
            PhaseState { r: 0.5, theta: 0.0, v_r: 1.0, v_theta: 0.0, v_phi: 0.0 };
        let opts = IntegrateOptions::default();
        let mut pts = Vec::new();
        walk_forward(&eq, Species::Ion, &seed.to_point(), 0.4, &opts, |u, p| pts.push((u, *p)));
        // before the first bounce the cross-section motion is a straight line
        let speed = 1.0 / (1.0f64 + 1.0).sqrt();
        for (u, p) in &pts {
            assert!((p.y1 - (0.5 + speed * u)).abs() < 1e-10);
            assert!(p.y2.abs() < 1e-14);
            assert!(p.v_z.abs() < 1e-14);
        }
    }

    #[test]
    fn first_bounce_flips_radial_velocity_and_keeps_angular_momentum() {
        let eq = vacuum_eq(2.0);
        let seed = PhaseState { r: 0.5, theta: 0.0, v_r: 1.0, v_theta: 0.0, v_phi: 0.3 };
        let p0 = (2.0 + 0.5) * 0.3; // R v_phi at the seed
        let opts = IntegrateOptions::default();
        let mut after_bounce: Option<PhasePoint> = None;
        let summary = walk_forward(&eq, Species::Ion, &seed.to_point(), 1.2, &opts, |_, p| {
            if after_bounce.is_none() && p.v_big_r < 0.0 {
                after_bounce = Some(*p);
            }
        });
        assert!(summary.bounces >= 1);
        let p = after_bounce.expect("should have bounced within the horizon");
        // v_phi itself rotates with the frame, but R v_phi is exactly carried
        let pm = (2.0 + p.y1) * p.v_phi;
        assert!((pm - p0).abs() < 1e-9, "angular momentum {pm} vs {p0}");
    }

    #[test]
    fn invariants_conserved_through_bounces_in_magnetic_field() {
        let eq = magnetic_eq(2.0);
        let opts = IntegrateOptions { dt: 1e-3, ..Default::default() };
        let seed = PhaseState { r: 0.62, theta: 1.1, v_r: 0.8, v_theta: -0.5, v_phi: 1.1 };
        let (e0, p0) = eq.invariants_for(
            Species::Electron,
            seed.r,
            seed.theta,
            &[seed.v_r, seed.v_theta, seed.v_phi],
        );
        let mut worst_e = 0.0_f64;
        let mut worst_p = 0.0_f64;
        let summary = walk_forward(&eq, Species::Electron, &seed.to_point(), 50.0, &opts, |_, p| {
            let st = p.to_state();
            let (e, pp) =
                eq.invariants_for(Species::Electron, st.r, st.theta, &[st.v_r, st.v_theta, st.v_phi]);
            worst_e = worst_e.max((e - e0).abs());
            worst_p = worst_p.max((pp - p0).abs());
        });
        assert!(summary.bounces > 0, "expected at least one bounce");
        assert!(worst_e < 1e-7, "energy drift {worst_e}");
        assert!(worst_p < 1e-7, "momentum drift {worst_p}");
    }

    #[test]
    fn time_reversal_symmetry_of_the_flow() {
        // run forward for u, reverse the endpoint, run forward again for u:
        // lands on the reversed seed
        for eq in [vacuum_eq(2.0), magnetic_eq(2.0)] {
            let opts = IntegrateOptions { dt: 5e-4, ..Default::default() };
            let seed =
                PhaseState { r: 0.4, theta: 0.7, v_r: 0.6, v_theta: 0.4, v_phi: -0.8 }.to_point();
            let horizon = 7.0;
            let mut end = seed;
            walk_forward(&eq, Species::Ion, &seed, horizon, &opts, |_, p| end = *p);
            let start_back = end.time_reversed();
            let mut back = start_back;
            walk_forward(&eq, Species::Ion, &start_back, horizon, &opts, |_, p| back = *p);
            let expect = seed.time_reversed();
            for (a, b) in [
                (back.y1, expect.y1),
                (back.y2, expect.y2),
                (back.v_big_r, expect.v_big_r),
                (back.v_phi, expect.v_phi),
                (back.v_z, expect.v_z),
            ] {
                assert!((a - b).abs() < 1e-6, "reversal mismatch: {a} vs {b}");
            }
        }
    }

    #[test]
    fn boundary_seeds_with_flipped_normal_velocity_share_the_orbit() {
        let eq = magnetic_eq(2.0);
        let opts = IntegrateOptions::default();
        let seed = PhaseState { r: 1.0, theta: 0.9, v_r: -0.7, v_theta: 0.2, v_phi: 0.5 };
        let flipped = PhaseState { v_r: 0.7, ..seed };
        let mut a_pts = Vec::new();
        let mut b_pts = Vec::new();
        walk_forward(&eq, Species::Ion, &seed.to_point(), 3.0, &opts, |_, p| a_pts.push(*p));
        walk_forward(&eq, Species::Ion, &flipped.to_point(), 3.0, &opts, |_, p| b_pts.push(*p));
        for (a, b) in a_pts.iter().zip(&b_pts) {
            assert!((a.y1 - b.y1).abs() < 1e-12);
            assert!((a.y2 - b.y2).abs() < 1e-12);
        }
    }

    #[test]
    fn q_average_of_one_is_one_and_contraction_holds() {
        let eq = vacuum_eq(2.0);
        let opts = IntegrateOptions { dt: 2e-3, ..Default::default() };
        let seed = PhaseState { r: 0.3, theta: 2.0, v_r: 0.5, v_theta: 0.1, v_phi: 0.4 };
        for lambda in [0.3, 1.0, 5.0] {
            let q = q_lambda_average(&eq, Species::Ion, &seed, lambda, 45.0 / lambda, &opts, |_| 1.0)
                .unwrap();
            assert!((q.value - 1.0).abs() < 1e-12);
            assert!(!q.tail_warning);
            // contraction: |Q g| <= sup |g|
            let g = |p: &PhasePoint| (3.0 * p.y1).sin() * (2.0 * p.y2).cos();
            let qg =
                q_lambda_average(&eq, Species::Ion, &seed, lambda, 45.0 / lambda, &opts, g).unwrap();
            assert!(qg.value.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn q_average_of_invariant_function_returns_seed_value() {
        let eq = magnetic_eq(2.0);
        let opts = IntegrateOptions { dt: 1e-3, ..Default::default() };
        let seed = PhaseState { r: 0.5, theta: 0.4, v_r: 0.6, v_theta: -0.3, v_phi: 0.9 };
        let g = |p: &PhasePoint| {
            let st = p.to_state();
            let (e, pp) = eq.invariants_for(
                Species::Electron,
                st.r,
                st.theta,
                &[st.v_r, st.v_theta, st.v_phi],
            );
            e * e + 0.3 * pp
        };
        let expect = {
            let (e, pp) = eq.invariants_for(
                Species::Electron,
                seed.r,
                seed.theta,
                &[seed.v_r, seed.v_theta, seed.v_phi],
            );
            e * e + 0.3 * pp
        };
        let q = q_lambda_average(&eq, Species::Electron, &seed, 0.8, 60.0, &opts, g).unwrap();
        assert!(
            (q.value - expect).abs() < 1e-6 * expect.abs(),
            "got {}, want {expect}",
            q.value
        );
    }

    #[test]
    fn large_lambda_average_returns_local_value() {
        let eq = magnetic_eq(2.0);
        let opts = IntegrateOptions { dt: 1e-6, ..Default::default() };
        let seed = PhaseState { r: 0.5, theta: 0.4, v_r: 0.2, v_theta: -0.3, v_phi: 0.6 };
        let g = |p: &PhasePoint| (p.y1 + 0.5 * p.y2).cos();
        let seed_val = g(&seed.to_point());
        let q = q_lambda_average(&eq, Species::Ion, &seed, 1e3, 0.045, &opts, g).unwrap();
        assert!((q.value - seed_val).abs() < 1e-3, "got {}, local {seed_val}", q.value);
    }

    #[test]
    fn log_lipschitz_family_bound_sampled() {
        let eq = vacuum_eq(2.0);
        let opts = IntegrateOptions { dt: 2e-3, ..Default::default() };
        let g = |p: &PhasePoint| (2.0 * p.y1 - p.y2).sin();
        for &(la, mu) in &[(0.5, 0.7), (1.0, 2.0), (3.0, 4.5)] {
            for &(r, th) in &[(0.3, 0.5), (0.7, 2.7)] {
                let seed = PhaseState { r, theta: th, v_r: 0.4, v_theta: 0.3, v_phi: 0.5 };
                let qa =
                    q_lambda_average(&eq, Species::Ion, &seed, la, 50.0 / la, &opts, g).unwrap();
                let qb =
                    q_lambda_average(&eq, Species::Ion, &seed, mu, 50.0 / mu, &opts, g).unwrap();
                let bound = 2.0 * (la.ln() - mu.ln()).abs();
                assert!(
                    (qa.value - qb.value).abs() <= bound + 1e-9,
                    "family bound violated: {} vs {}",
                    (qa.value - qb.value).abs(),
                    bound
                );
            }
        }
    }

    #[test]
    fn ergodic_average_of_invariant_is_exact_and_flagged_converged() {
        let eq = vacuum_eq(2.0);
        let opts = IntegrateOptions { dt: 2e-3, ..Default::default() };
        let seed = PhaseState { r: 0.45, theta: 0.0, v_r: 0.5, v_theta: 0.2, v_phi: 0.3 };
        let (e0, p0) = eq.invariants_for(Species::Ion, seed.r, seed.theta, &[0.5, 0.2, 0.3]);
        let g = |p: &PhasePoint| {
            let st = p.to_state();
            let (e, pp) = eq.invariants_for(Species::Ion, st.r, st.theta, &[st.v_r, st.v_theta, st.v_phi]);
            2.0 * e - pp
        };
        let (avg, gap) = ergodic_average(&eq, Species::Ion, &seed, 50.0, &opts, g).unwrap();
        assert!((avg - (2.0 * e0 - p0)).abs() < 1e-7);
        assert!(gap < 1e-7);
    }

    #[test]
    fn odd_phase_functions_average_out_over_seed_pairs() {
        // the mean over a seed and its poloidal reflection tends to zero for
        // integrands odd under (v_r, v_theta) -> (-v_r, -v_theta)
        let eq = vacuum_eq(2.0);
        let opts = IntegrateOptions { dt: 2e-3, ..Default::default() };
        let g = |p: &PhasePoint| {
            let st = p.to_state();
            let gamma = p.gamma();
            (st.v_r / gamma) * (1.0 - st.r * st.r)
        };
        let seed = PhaseState { r: 0.5, theta: 1.3, v_r: 0.7, v_theta: 0.4, v_phi: 0.2 };
        let refl = PhaseState { v_r: -0.7, v_theta: -0.4, ..seed };
        let (a, _) = ergodic_average(&eq, Species::Ion, &seed, 800.0, &opts, g).unwrap();
        let (b, _) = ergodic_average(&eq, Species::Ion, &refl, 800.0, &opts, g).unwrap();
        assert!((a + b).abs() < 5e-3, "pair mean {}", a + b);
    }

    #[test]
    fn measure_preservation_for_a_small_cloud() {
        // empirical covariance volume of a phase-space cloud is carried
        // unchanged while no particle bounces
        let eq = magnetic_eq(2.0);
        let opts = IntegrateOptions { dt: 1e-3, ..Default::default() };
        let n = 400;
        let mut seeds = Vec::new();
        let mut lcg = 123456789u64;
        let mut unit = || {
            lcg = lcg.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            2.0 * ((lcg >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        for _ in 0..n {
            seeds.push(PhasePoint {
                y1: 0.1 + 0.02 * unit(),
                y2: -0.2 + 0.02 * unit(),
                v_big_r: 0.3 + 0.02 * unit(),
                v_phi: 0.2 + 0.02 * unit(),
                v_z: 0.1 + 0.02 * unit(),
            });
        }
        let volume = |pts: &[PhasePoint]| -> f64 {
            let dim = 5;
            let mean = pts.iter().fold([0.0; 5], |mut m, p| {
                for (k, v) in [p.y1, p.y2, p.v_big_r, p.v_phi, p.v_z].iter().enumerate() {
                    m[k] += v / pts.len() as f64;
                }
                m
            });
            let mut cov = nalgebra::DMatrix::<f64>::zeros(dim, dim);
            for p in pts {
                let d = [
                    p.y1 - mean[0],
                    p.y2 - mean[1],
                    p.v_big_r - mean[2],
                    p.v_phi - mean[3],
                    p.v_z - mean[4],
                ];
                for i in 0..dim {
                    for j in 0..dim {
                        cov[(i, j)] += d[i] * d[j] / pts.len() as f64;
                    }
                }
            }
            cov.determinant().abs().sqrt()
        };
        let v0 = volume(&seeds);
        let moved: Vec<PhasePoint> = seeds
            .iter()
            .map(|s| {
                let mut end = *s;
                walk_forward(&eq, Species::Ion, s, 0.5, &opts, |_, p| end = *p);
                end
            })
            .collect();
        let v1 = volume(&moved);
        let rel = (v1 - v0).abs() / v0;
        assert!(rel < 5.0 / (n as f64).sqrt(), "volume drift {rel}");
    }

    #[test]
    fn grazing_seed_is_flagged_degenerate() {
        let eq = vacuum_eq(2.0);
        let opts = IntegrateOptions { dt: 1e-3, ..Default::default() };
        // tangential launch right at the wall
        let seed = PhaseState { r: 1.0 - 1e-13, theta: 0.3, v_r: 1e-12, v_theta: 0.8, v_phi: 0.0 };
        let cache = integrate_reflecting(&eq, Species::Ion, &seed, 5.0, &opts, 1).unwrap();
        assert!(cache.degenerate);
    }

    #[test]
    fn rejects_seeds_outside_the_torus() {
        let eq = vacuum_eq(2.0);
        let opts = IntegrateOptions::default();
        let seed = PhaseState { r: 1.5, theta: 0.0, v_r: 0.0, v_theta: 0.0, v_phi: 0.0 };
        assert!(integrate_reflecting(&eq, Species::Ion, &seed, 1.0, &opts, 1).is_err());
        assert!(ergodic_average(&eq, Species::Ion, &seed, 1.0, &opts, |_| 0.0).is_err());
    }
}
