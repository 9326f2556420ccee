//! Equilibrium ansatz families `mu(e, p)` for both species, with analytic
//! partial derivatives, hypothesis validation and the scaling `mu(e, K p)`.
//!
//! `e` is the particle energy invariant and `p` the toroidal angular-momentum
//! invariant. Species are labeled by the sign of their charge; the electron
//! profile of a pair related by the reflection symmetry `mu+(e, p) =
//! mu-(e, -p)` is the one the unstable-example machinery works with.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Charge species: `Ion` carries the `+` sign, `Electron` the `-` sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Species {
    Ion,
    Electron,
}

impl Species {
    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            Species::Ion => 1.0,
            Species::Electron => -1.0,
        }
    }

    pub const BOTH: [Species; 2] = [Species::Ion, Species::Electron];
}

/// Which value `evaluate` returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Deriv {
    Value,
    De,
    Dp,
}

/// Built-in ansatz families.
///
/// In every family the electron profile is the stated closed form and the ion
/// profile is its `p`-reflection, so the pair satisfies the reflection
/// symmetry by construction.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ProfileFamily {
    /// `mu = 0` for both species (vacuum).
    Vacuum,
    /// `mu = c exp(-e - p^2)`: even in `p`, momentum-decreasing.
    StableEven { amplitude: f64 },
    /// `mu- = c (1 + beta p^2 + delta p^2 tanh p) exp(-e)`.
    ///
    /// `delta = 0` reduces to the even family `c (1 + beta p^2) exp(-e)`;
    /// `delta > 0` adds an odd part that drives a nontrivial poloidal
    /// magnetic field while keeping `p mu_p >= c0 p^2 exp(-e)`.
    Instability { amplitude: f64, beta: f64, delta: f64 },
    /// `mu- = c exp(-e) (1 - eps tanh p)`: momentum derivative uniformly
    /// small, equilibrium field not required to be small.
    SmallMuP { amplitude: f64, eps: f64 },
}

/// An ansatz pair with decay metadata and the optional momentum scaling.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MuProfile {
    pub family: ProfileFamily,
    /// Momentum scaling `K`: evaluations read `mu(e, K p)`.
    pub k_scale: f64,
    /// Decay exponent in `|mu| + |mu_p| + |mu_e| <= c_mu / (1 + |e|^gamma)`.
    pub gamma: f64,
    /// Decay constant of the same bound, on the kinematically reachable set.
    pub c_mu: f64,
}

impl MuProfile {
    pub fn new(family: ProfileFamily, gamma: f64, c_mu: f64) -> Result<Self> {
        if gamma <= 3.0 {
            return Err(Error::Profile(format!("decay exponent must exceed 3, got {gamma}")));
        }
        if c_mu < 0.0 {
            return Err(Error::Profile("decay constant must be nonnegative".into()));
        }
        validate_family(&family)?;
        Ok(Self { family, k_scale: 1.0, gamma, c_mu })
    }

    /// Family with default decay metadata (`gamma = 5`, sampled `c_mu`).
    pub fn with_default_decay(family: ProfileFamily, a: f64) -> Result<Self> {
        let mut p = Self::new(family, 5.0, 0.0)?;
        p.c_mu = p.sampled_decay_constant(a);
        Ok(p)
    }

    /// `mu(e, K p)` with chain-rule derivatives.
    pub fn scale_in_p(&self, k: f64) -> Result<Self> {
        if !(k > 0.0) {
            return Err(Error::Profile(format!("momentum scaling must be positive, got {k}")));
        }
        let mut out = *self;
        out.k_scale = self.k_scale * k;
        Ok(out)
    }

    /// Spec'd evaluation entry point; rejects energies below the physical
    /// threshold `e = 1`.
    pub fn evaluate(&self, species: Species, e: f64, p: f64, which: Deriv) -> Result<f64> {
        if e < 1.0 {
            return Err(Error::Domain(format!("energy below rest mass: e = {e}")));
        }
        let (v, de, dp) = self.eval_all(species, e, p);
        Ok(match which {
            Deriv::Value => v,
            Deriv::De => de,
            Deriv::Dp => dp,
        })
    }

    /// Fast path returning `(mu, mu_e, mu_p)` in one call.
    ///
    /// Unlike [`evaluate`](Self::evaluate) this accepts any energy: an
    /// equilibrium with a negative electric potential shifts the ion energy
    /// invariant slightly below 1, and the closed forms extend there.
    #[inline]
    pub fn eval_all(&self, species: Species, e: f64, p: f64) -> (f64, f64, f64) {
        let q = self.k_scale * p;
        let (v, de, dq) = match species {
            Species::Electron => family_eval(&self.family, e, q),
            // mu+(e, p) = mu-(e, -p)  =>  mu_p+(e, p) = -mu_p-(e, -p)
            Species::Ion => {
                let (v, de, dq) = family_eval(&self.family, e, -q);
                (v, de, -dq)
            }
        };
        (v, de, self.k_scale * dq)
    }

    /// `sup (|mu| + |mu_p| + |mu_e|) (1 + |e|^gamma)` over a lattice covering
    /// the kinematically reachable set `|p| <= (a + 1) sqrt(e^2 - 1)`.
    pub fn sampled_decay_constant(&self, a: f64) -> f64 {
        let mut worst = 0.0_f64;
        for_reachable_lattice(a, |e, p| {
            for sp in Species::BOTH {
                let (v, de, dp) = self.eval_all(sp, e, p);
                let bound = (v.abs() + de.abs() + dp.abs()) * (1.0 + e.abs().powf(self.gamma));
                worst = worst.max(bound);
            }
        });
        worst * 1.05 // headroom over the sampling
    }

    /// Sampled hypothesis report.
    pub fn validate_hypotheses(&self, a: f64) -> HypothesisReport {
        let mut rep = HypothesisReport {
            decay_margin: f64::NEG_INFINITY,
            monotone_margin: f64::NEG_INFINITY,
            cond_5_5_margin: f64::NEG_INFINITY,
            c0_5_12: f64::INFINITY,
            cond_5_14_margin: f64::INFINITY,
            ..Default::default()
        };
        for_reachable_lattice(a, |e, p| {
            let (vm, dem, dpm) = self.eval_all(Species::Electron, e, p);
            let (vp, dep, dpp) = self.eval_all(Species::Ion, e, p);
            for (v, de, dp) in [(vm, dem, dpm), (vp, dep, dpp)] {
                if self.c_mu > 0.0 {
                    let ratio = (v.abs() + de.abs() + dp.abs())
                        * (1.0 + e.abs().powf(self.gamma))
                        / self.c_mu;
                    rep.decay_margin = rep.decay_margin.max(ratio);
                }
                if v > 1e-14 {
                    rep.monotone_margin = rep.monotone_margin.max(de / v);
                }
                rep.cond_5_5_margin = rep.cond_5_5_margin.max(p * dp);
                rep.eps_5_6 = rep.eps_5_6.max(dp.abs() * (1.0 + e.abs().powf(self.gamma)));
            }
            // (5.8): mu+(e, p) = mu-(e, -p)
            let (vm_r, _, _) = self.eval_all(Species::Electron, e, -p);
            rep.symmetry_gap = rep.symmetry_gap.max((vp - vm_r).abs());
            // (5.12) for the electron profile with nu = exp(-e)
            if p.abs() > 1e-9 {
                rep.c0_5_12 = rep.c0_5_12.min(p * dpm / (p * p * (-e).exp()));
            }
            // (5.14): p mu_p + e mu_e > 0
            rep.cond_5_14_margin = rep.cond_5_14_margin.min(p * dpm + e * dem);
        });
        let tol = 1e-10;
        rep.decay_ok = self.c_mu == 0.0 || rep.decay_margin <= 1.0 + tol;
        rep.monotone_ok = rep.monotone_margin < 0.0 || rep.monotone_margin.is_infinite();
        rep.symmetry_5_8_ok = rep.symmetry_gap <= tol;
        rep.cond_5_5 = rep.cond_5_5_margin <= tol;
        rep.cond_5_12 = rep.c0_5_12.is_finite() && rep.c0_5_12 > tol;
        rep.cond_5_14 = rep.cond_5_14_margin > 0.0;
        rep
    }

    pub fn is_vacuum(&self) -> bool {
        matches!(self.family, ProfileFamily::Vacuum)
    }
}

/// Per-hypothesis flags with the sampled worst-case margins.
#[derive(Debug, Clone, Default, Serialize)]
pub struct HypothesisReport {
    pub decay_ok: bool,
    /// worst `(|mu|+|mu_p|+|mu_e|)(1+e^gamma)/c_mu`; must stay <= 1
    pub decay_margin: f64,
    pub monotone_ok: bool,
    /// worst `mu_e/mu` over points with `mu > 0`; must stay negative
    pub monotone_margin: f64,
    pub symmetry_5_8_ok: bool,
    pub symmetry_gap: f64,
    /// `p mu_p <= 0` for every species
    pub cond_5_5: bool,
    pub cond_5_5_margin: f64,
    /// smallest admissible epsilon in `|mu_p| <= eps/(1+|e|^gamma)`
    pub eps_5_6: f64,
    /// `p mu_p >= c0 p^2 nu(e)` with `nu = exp(-e)`, electron profile
    pub cond_5_12: bool,
    pub c0_5_12: f64,
    /// `p mu_p + e mu_e > 0`: exposed only; no shipped family satisfies it,
    /// since at `p = 0` it demands `e mu_e > 0` against the monotonicity
    /// hypothesis
    pub cond_5_14: bool,
    pub cond_5_14_margin: f64,
}

fn validate_family(family: &ProfileFamily) -> Result<()> {
    match *family {
        ProfileFamily::Vacuum => Ok(()),
        ProfileFamily::StableEven { amplitude } => {
            if amplitude < 0.0 {
                return Err(Error::Profile("amplitude must be nonnegative".into()));
            }
            Ok(())
        }
        ProfileFamily::Instability { amplitude, beta, delta } => {
            if amplitude < 0.0 || beta <= 0.0 {
                return Err(Error::Profile("need amplitude >= 0 and beta > 0".into()));
            }
            if delta < 0.0 || delta > beta {
                return Err(Error::Profile("need 0 <= delta <= beta for positivity".into()));
            }
            Ok(())
        }
        ProfileFamily::SmallMuP { amplitude, eps } => {
            if amplitude < 0.0 || !(0.0..1.0).contains(&eps) {
                return Err(Error::Profile("need amplitude >= 0 and 0 <= eps < 1".into()));
            }
            Ok(())
        }
    }
}

/// Electron-profile closed forms: returns `(mu, d mu/de, d mu/dq)` at `(e, q)`.
#[inline]
fn family_eval(family: &ProfileFamily, e: f64, q: f64) -> (f64, f64, f64) {
    match *family {
        ProfileFamily::Vacuum => (0.0, 0.0, 0.0),
        ProfileFamily::StableEven { amplitude } => {
            let v = amplitude * (-e - q * q).exp();
            (v, -v, -2.0 * q * v)
        }
        ProfileFamily::Instability { amplitude, beta, delta } => {
            let ee = (-e).exp();
            let t = q.tanh();
            let sech2 = 1.0 - t * t;
            let poly = 1.0 + beta * q * q + delta * q * q * t;
            let dpoly = 2.0 * beta * q + delta * (2.0 * q * t + q * q * sech2);
            (amplitude * poly * ee, -amplitude * poly * ee, amplitude * dpoly * ee)
        }
        ProfileFamily::SmallMuP { amplitude, eps } => {
            let ee = (-e).exp();
            let t = q.tanh();
            let v = amplitude * ee * (1.0 - eps * t);
            (v, -v, -amplitude * ee * eps * (1.0 - t * t))
        }
    }
}

fn for_reachable_lattice(a: f64, mut f: impl FnMut(f64, f64)) {
    let n_e = 60;
    let n_p = 61;
    let e_max = 14.0;
    for ie in 0..n_e {
        let e = 1.0 + (e_max - 1.0) * (ie as f64 + 0.5) / n_e as f64;
        let p_max = (a + 1.0) * (e * e - 1.0).max(0.0).sqrt();
        for ip in 0..n_p {
            let p = p_max * (2.0 * (ip as f64) / (n_p - 1) as f64 - 1.0);
            f(e, p);
        }
    }
}
