//! Super-Gaussian potentials and their variational representation
//! `-2 log t(s) = min_{gamma >= 0} s^2 / gamma + h(gamma)`.
//!
//! All densities are normalized, so `-2 log t` carries the exact log
//! normalizer. For Student's t the dual `h` is split into a convex part
//! `nu / (tau gamma) + C` and a concave part `(nu + 1) log gamma`; the concave
//! part is replaced by a tangent line `e gamma - g*(e)`, which yields a convex
//! majorizer of the penalty in `s`.

use std::f64::consts::PI;

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Lower clamp on minimizing variances, keeps `1 / gamma` finite.
pub const GAMMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Potential {
    /// `(tau / 2) exp(-tau |s|)`
    Laplace { tau: f64 },
    /// `c(nu) sqrt(tau) (1 + tau s^2 / nu)^(-(nu + 1) / 2)`
    StudentT { tau: f64, nu: f64 },
    /// `N(s | 0, 1 / xi)`
    Gaussian { xi: f64 },
}

impl Potential {
    pub fn laplace(tau: f64) -> Result<Self> {
        positive("tau", tau)?;
        Ok(Potential::Laplace { tau })
    }

    pub fn student_t(tau: f64, nu: f64) -> Result<Self> {
        positive("tau", tau)?;
        if !(nu.is_finite() && nu > 2.0) {
            return Err(Error::InvalidParameter(format!(
                "Student's t shape must be > 2, got {nu}"
            )));
        }
        Ok(Potential::StudentT { tau, nu })
    }

    pub fn gaussian(xi: f64) -> Result<Self> {
        positive("xi", xi)?;
        Ok(Potential::Gaussian { xi })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Potential::Laplace { .. } => "laplace",
            Potential::StudentT { .. } => "student-t",
            Potential::Gaussian { .. } => "gaussian",
        }
    }

    /// The scale hyperparameter (`tau` or `xi`).
    pub fn scale(&self) -> f64 {
        match *self {
            Potential::Laplace { tau } | Potential::StudentT { tau, .. } => tau,
            Potential::Gaussian { xi } => xi,
        }
    }

    /// Same family with a new scale hyperparameter.
    pub fn with_scale(&self, scale: f64) -> Self {
        match *self {
            Potential::Laplace { .. } => Potential::Laplace { tau: scale },
            Potential::StudentT { nu, .. } => Potential::StudentT { tau: scale, nu },
            Potential::Gaussian { .. } => Potential::Gaussian { xi: scale },
        }
    }

    /// `-2 log t(s)`.
    pub fn neg2_log(&self, s: f64) -> f64 {
        match *self {
            Potential::Laplace { tau } => 2.0 * tau * s.abs() - 2.0 * (tau / 2.0).ln(),
            Potential::StudentT { tau, nu } => {
                (nu + 1.0) * (tau * s * s / nu).ln_1p() - 2.0 * student_log_norm(tau, nu)
            }
            Potential::Gaussian { xi } => xi * s * s - xi.ln() + (2.0 * PI).ln(),
        }
    }

    /// Minimizer of `s^2 / gamma + h(gamma)`.
    pub fn gamma_min(&self, s: f64) -> f64 {
        match *self {
            Potential::Laplace { tau } => (s.abs() / tau).max(GAMMA_FLOOR),
            Potential::StudentT { tau, nu } => (nu / tau + s * s) / (nu + 1.0),
            Potential::Gaussian { xi } => 1.0 / xi,
        }
    }

    /// The dual function `h(gamma)`. Gaussian potentials have a single
    /// admissible `gamma = 1 / xi`; any other value maps to `+inf`.
    pub fn h_dual(&self, gamma: f64) -> Result<f64> {
        positive("gamma", gamma)?;
        Ok(match *self {
            Potential::Laplace { tau } => tau * tau * gamma - 2.0 * (tau / 2.0).ln(),
            Potential::StudentT { tau, nu } => {
                nu / (tau * gamma) + (nu + 1.0) * gamma.ln() + student_h_const(tau, nu)
            }
            Potential::Gaussian { xi } => {
                if ((gamma * xi) - 1.0).abs() <= 1e-12 {
                    -xi.ln() + (2.0 * PI).ln()
                } else {
                    f64::INFINITY
                }
            }
        })
    }

    /// Convex/concave split of the Student's t dual.
    pub fn split_h(&self) -> Result<StudentSplit> {
        match *self {
            Potential::StudentT { tau, nu } => Ok(StudentSplit { tau, nu }),
            other => Err(Error::WrongKind {
                expected: "student-t",
                actual: other.kind(),
            }),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

/// `log` of the Student's t normalizer `c(nu) sqrt(tau)`.
fn student_log_norm(tau: f64, nu: f64) -> f64 {
    ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (nu * PI).ln() + 0.5 * tau.ln()
}

/// Constant `C(nu, tau)` making `min_gamma s^2/gamma + h(gamma)` tight.
fn student_h_const(tau: f64, nu: f64) -> f64 {
    let a = nu + 1.0;
    -a + a * a.ln() - a * (nu / tau).ln() - 2.0 * student_log_norm(tau, nu)
}

/// `h = h_convex + h_concave` for a Student's t potential.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudentSplit {
    pub tau: f64,
    pub nu: f64,
}

impl StudentSplit {
    pub fn h_convex(&self, gamma: f64) -> f64 {
        self.nu / (self.tau * gamma) + student_h_const(self.tau, self.nu)
    }

    pub fn h_concave(&self, gamma: f64) -> f64 {
        (self.nu + 1.0) * gamma.ln()
    }

    /// Fenchel conjugate of the concave part, `g*(e) = a - a log(a / e)`, `a = nu + 1`.
    pub fn conjugate(&self, e: f64) -> f64 {
        let a = self.nu + 1.0;
        a - a * (a / e).ln()
    }

    /// Tangent of `h_concave` at `gamma_min(p)`.
    pub fn refit_tangent(&self, p: f64) -> ConvexTangent {
        let gamma = (self.nu / self.tau + p * p) / (self.nu + 1.0);
        ConvexTangent {
            e: (self.nu + 1.0) / gamma,
        }
    }

    /// `-2 log t_convex(s; e) = min_gamma s^2/gamma + h_convex(gamma) + e gamma`.
    pub fn convexified_neg2_log(&self, e: ConvexTangent, s: f64) -> f64 {
        2.0 * (e.e * (s * s + self.nu / self.tau)).sqrt() + student_h_const(self.tau, self.nu)
            - self.conjugate(e.e)
    }
}

/// Slope of the tangent line to the concave part of the Student's t dual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexTangent {
    pub e: f64,
}

impl ConvexTangent {
    pub fn new(e: f64) -> Result<Self> {
        positive("tangent slope e", e)?;
        Ok(Self { e })
    }
}

/// Refit the tangent of a Student's t potential at the effective point `p`.
pub fn refit_tangent(pot: &Potential, p: f64) -> Result<ConvexTangent> {
    if !(p >= 0.0) {
        return Err(Error::InvalidParameter(format!("p must be >= 0, got {p}")));
    }
    Ok(pot.split_h()?.refit_tangent(p))
}

pub fn convexified_neg2_log(pot: &Potential, e: f64, s: f64) -> Result<f64> {
    let e = ConvexTangent::new(e)?;
    Ok(pot.split_h()?.convexified_neg2_log(e, s))
}

/// A penalty `psi(p)` on the effective magnitude `p = sqrt(z + s^2)` as used
/// by the inner least-squares problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Penalty {
    Plain(Potential),
    /// Student's t majorized with tangent slope `e`.
    Convexified {
        tau: f64,
        nu: f64,
        e: f64,
    },
}

impl Penalty {
    pub fn convexified(pot: &Potential, e: ConvexTangent) -> Result<Self> {
        let split = pot.split_h()?;
        Ok(Penalty::Convexified {
            tau: split.tau,
            nu: split.nu,
            e: e.e,
        })
    }

    /// The part of `psi` that does not depend on `p` (log normalizers).
    pub fn constant(&self) -> f64 {
        match *self {
            Penalty::Plain(Potential::Laplace { tau }) => -2.0 * (tau / 2.0).ln(),
            Penalty::Plain(Potential::Gaussian { xi }) => -xi.ln() + (2.0 * PI).ln(),
            Penalty::Plain(Potential::StudentT { tau, nu }) => -2.0 * student_log_norm(tau, nu),
            Penalty::Convexified { tau, nu, e } => {
                student_h_const(tau, nu) - StudentSplit { tau, nu }.conjugate(e)
            }
        }
    }

    /// `psi(p) - constant()` and the first two derivatives in `p`.
    #[inline]
    pub fn shape(&self, p: f64) -> (f64, f64, f64) {
        match *self {
            Penalty::Plain(Potential::Laplace { tau }) => (2.0 * tau * p, 2.0 * tau, 0.0),
            Penalty::Plain(Potential::Gaussian { xi }) => (xi * p * p, 2.0 * xi * p, 2.0 * xi),
            Penalty::Plain(Potential::StudentT { tau, nu }) => {
                let c = nu / tau;
                let q = p * p + c;
                (
                    (nu + 1.0) * (p * p / c).ln_1p(),
                    2.0 * (nu + 1.0) * p / q,
                    2.0 * (nu + 1.0) * (c - p * p) / (q * q),
                )
            }
            Penalty::Convexified { tau, nu, e } => {
                let c = nu / tau;
                let q = p * p + c;
                let rq = q.sqrt();
                let se = e.sqrt();
                (2.0 * se * rq, 2.0 * se * p / rq, 2.0 * se * c / (q * rq))
            }
        }
    }

    /// Value, first and second derivative in `p`. Requires `p > 0` for the
    /// derivatives to be meaningful; no checks are made.
    pub fn eval(&self, p: f64) -> (f64, f64, f64) {
        let (v, d1, d2) = self.shape(p);
        (v + self.constant(), d1, d2)
    }

    /// `psi'(p) / p`, i.e. `2 / gamma*` at `p`: the precision this penalty
    /// contributes, doubled. Well defined at `p = 0` for smooth penalties.
    #[inline]
    pub fn slope_over_p(&self, p: f64) -> f64 {
        match *self {
            Penalty::Plain(Potential::Laplace { tau }) => 2.0 * tau / p.max(tau * GAMMA_FLOOR),
            Penalty::Plain(Potential::Gaussian { xi }) => 2.0 * xi,
            Penalty::Plain(Potential::StudentT { tau, nu }) => {
                2.0 * (nu + 1.0) / (p * p + nu / tau)
            }
            Penalty::Convexified { tau, nu, e } => 2.0 * (e / (p * p + nu / tau)).sqrt(),
        }
    }

    /// `psi(p)`.
    pub fn value(&self, p: f64) -> f64 {
        self.eval(p).0
    }

    /// `(psi(p), psi'(p))`, rejecting nonpositive `p`.
    pub fn value_and_slope(&self, p: f64) -> Result<(f64, f64)> {
        if !(p > 0.0 && p.is_finite()) {
            return Err(Error::InvalidParameter(format!("p must be > 0, got {p}")));
        }
        let (v, d, _) = self.eval(p);
        Ok((v, d))
    }
}
