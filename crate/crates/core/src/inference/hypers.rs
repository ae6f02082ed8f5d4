//! Prior hyperparameters, their closed-form and Newton updates, and the EM
//! initialization on raw coefficients.

use crate::error::{Error, Result};
use crate::potentials::Potential;
use crate::tree::{bp_infer, update_theta, TreeParams, TreeTopology};
use crate::wavelet::WaveletLayout;

use super::config::Model;

/// Bounds applied to every learned scale parameter.
pub const HYPER_MIN: f64 = 1e-6;
pub const HYPER_MAX: f64 = 1e8;

pub(crate) fn clamp_hyper(v: f64) -> f64 {
    v.clamp(HYPER_MIN, HYPER_MAX)
}

/// Potentials of one detail level: one shared potential (factorial) or a
/// low/high pair indexed by the latent state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LevelPrior {
    Single(Potential),
    Pair { low: Potential, high: Potential },
}

impl LevelPrior {
    pub fn n_states(&self) -> usize {
        match self {
            LevelPrior::Single(_) => 1,
            LevelPrior::Pair { .. } => 2,
        }
    }

    /// Potential of state `r`; a single potential serves both states.
    pub fn state(&self, r: usize) -> &Potential {
        match self {
            LevelPrior::Single(p) => p,
            LevelPrior::Pair { low, high } => {
                if r == 0 {
                    low
                } else {
                    high
                }
            }
        }
    }

    pub fn set_state(&mut self, r: usize, pot: Potential) {
        match self {
            LevelPrior::Single(p) => *p = pot,
            LevelPrior::Pair { low, high } => {
                if r == 0 {
                    *low = pot
                } else {
                    *high = pot
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypers {
    /// Precision of the Gaussian potential on scaling coefficients.
    pub xi_scaling: f64,
    /// `levels[l - 1]` holds the potentials of detail level `l`.
    pub levels: Vec<LevelPrior>,
    /// Latent-tree CPTs, present for tree models only.
    pub tree: Option<TreeParams>,
}

impl Hypers {
    /// Neutral starting values.
    pub fn default_for(model: Model, levels: usize, nu: f64) -> Result<Self> {
        let prior = match model {
            Model::LapFact => LevelPrior::Single(Potential::laplace(1.0)?),
            Model::TFact => LevelPrior::Single(Potential::student_t(1.0, nu)?),
            Model::LapTree => LevelPrior::Pair {
                low: Potential::laplace(4.0)?,
                high: Potential::laplace(0.5)?,
            },
            Model::TTree => LevelPrior::Pair {
                low: Potential::gaussian(4.0)?,
                high: Potential::student_t(1.0, nu)?,
            },
        };
        Ok(Self {
            xi_scaling: 1.0,
            levels: vec![prior; levels],
            tree: model
                .is_tree()
                .then(|| TreeParams::new(levels, 0.5, 0.1, 0.9)),
        })
    }

    pub fn level(&self, level: usize) -> &LevelPrior {
        &self.levels[level - 1]
    }

    /// Number of per-level potential parameters (`2L` tree, `L` factorial).
    pub fn n_level_params(&self) -> usize {
        self.levels.iter().map(LevelPrior::n_states).sum()
    }

    /// Check that the hyperparameters fit `model` at depth `levels`.
    pub fn check(&self, model: Model, levels: usize) -> Result<()> {
        if self.levels.len() != levels {
            return Err(Error::DimensionMismatch {
                expected: levels,
                actual: self.levels.len(),
            });
        }
        if !(self.xi_scaling.is_finite() && self.xi_scaling > 0.0) {
            return Err(Error::InvalidParameter(
                "scaling precision must be positive".into(),
            ));
        }
        let states = if model.is_tree() { 2 } else { 1 };
        if self.levels.iter().any(|p| p.n_states() != states) {
            return Err(Error::InvalidParameter(format!(
                "{model} needs {states} potential(s) per level"
            )));
        }
        match (&self.tree, model.is_tree()) {
            (Some(t), true) if t.levels() >= levels => Ok(()),
            (None, false) => Ok(()),
            _ => Err(Error::InvalidParameter(format!(
                "tree parameters do not match model {model}"
            ))),
        }
    }
}

/// Closed-form minimizer of `sum_j w_j psi(p_j)` over the scale of a Laplace
/// or Gaussian potential. `None` for Student's t or when the data carry no
/// information (no mass, or all `p = 0`).
pub fn closed_form_scale(pot: &Potential, w: &[f64], p: &[f64]) -> Option<f64> {
    let mass: f64 = w.iter().sum();
    let denom: f64 = match pot {
        Potential::Laplace { .. } => w.iter().zip(p).map(|(w, p)| w * p).sum(),
        Potential::Gaussian { .. } => w.iter().zip(p).map(|(w, p)| w * p * p).sum(),
        Potential::StudentT { .. } => return None,
    };
    (mass > 0.0 && denom > 0.0).then(|| clamp_hyper(mass / denom))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauFit {
    pub tau: f64,
    /// Stationarity residual divided by the total weight.
    pub residual: f64,
    pub iterations: usize,
}

/// `F(x) = sum_j w_j ((nu + 1) log(1 + p_j^2 e^x / nu) - x)` with `x = log tau`.
pub fn student_tau_objective(w: &[f64], p: &[f64], nu: f64, log_tau: f64) -> f64 {
    let t = log_tau.exp();
    w.iter()
        .zip(p)
        .map(|(w, p)| w * ((nu + 1.0) * (p * p * t / nu).ln_1p() - log_tau))
        .sum()
}

fn student_tau_derivs(w: &[f64], p: &[f64], nu: f64, log_tau: f64) -> (f64, f64) {
    let t = log_tau.exp();
    let (mut d1, mut d2) = (0.0, 0.0);
    for (w, p) in w.iter().zip(p) {
        let c = p * p * t / nu;
        let f = c / (1.0 + c);
        d1 += w * ((nu + 1.0) * f - 1.0);
        d2 += w * (nu + 1.0) * f / (1.0 + c);
    }
    (d1, d2)
}

/// Newton's method on `log tau` for the Student's t scale, with Armijo
/// backtracking. The objective is convex in `log tau`.
pub fn student_tau_newton(w: &[f64], p: &[f64], nu: f64, tau0: f64) -> TauFit {
    let mass: f64 = w.iter().sum();
    let spread: f64 = w.iter().zip(p).map(|(w, p)| w * p * p).sum();
    if !(mass > 0.0) || !(spread > 0.0) {
        return TauFit {
            tau: tau0,
            residual: 0.0,
            iterations: 0,
        };
    }
    let (lo, hi) = (HYPER_MIN.ln(), HYPER_MAX.ln());
    let mut x = tau0.clamp(HYPER_MIN, HYPER_MAX).ln();
    let mut f = student_tau_objective(w, p, nu, x);
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    while iterations < 100 {
        let (d1, d2) = student_tau_derivs(w, p, nu, x);
        residual = d1 / mass;
        if residual.abs() <= 1e-13 || (x <= lo && d1 > 0.0) || (x >= hi && d1 < 0.0) {
            break;
        }
        iterations += 1;
        let mut step = if d2 > 0.0 { -d1 / d2 } else { -d1.signum() };
        step = step.clamp(-5.0, 5.0);
        let mut accepted = false;
        for _ in 0..60 {
            let xn = (x + step).clamp(lo, hi);
            let fnew = student_tau_objective(w, p, nu, xn);
            if fnew <= f + 1e-4 * (xn - x) * d1 {
                accepted = xn != x;
                x = xn;
                f = fnew;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // at machine precision of F; take the last Newton point anyway
            let xn = (x - if d2 > 0.0 { d1 / d2 } else { 0.0 }).clamp(lo, hi);
            if xn == x {
                break;
            }
            x = xn;
            f = student_tau_objective(w, p, nu, x);
        }
    }
    TauFit {
        tau: x.exp(),
        residual,
        iterations,
    }
}

/// New scale for potential `pot` from weights `w` at magnitudes `p`, or the
/// old one when the data carry no information.
pub(crate) fn refit_scale(pot: &Potential, w: &[f64], p: &[f64]) -> Potential {
    let scale = match pot {
        Potential::StudentT { tau, nu } => {
            Some(clamp_hyper(student_tau_newton(w, p, *nu, *tau).tau))
        }
        _ => closed_form_scale(pot, w, p),
    };
    scale.map_or(*pot, |s| pot.with_scale(s))
}

/// Output of [`fit_prior`].
#[derive(Debug, Clone)]
pub struct EmFit {
    pub hypers: Hypers,
    /// `log P(s)` of the detail coefficients before each EM iteration and
    /// after the last one (tree models), or the single factorial value.
    pub log_likelihood: Vec<f64>,
}

/// Fit the prior to raw coefficients by maximizing `log P(s)`: per-level
/// moment matching for factorial models, `em_iters` EM iterations for trees.
pub fn fit_prior(
    layout: &WaveletLayout,
    coeffs: &[f64],
    model: Model,
    nu: f64,
    em_iters: usize,
) -> Result<EmFit> {
    if coeffs.len() != layout.len() {
        return Err(Error::DimensionMismatch {
            expected: layout.len(),
            actual: coeffs.len(),
        });
    }
    let levels = layout.levels();
    let scal = &coeffs[..layout.n_scaling()];
    let ones = vec![1.0; layout.len()];
    let abs: Vec<f64> = coeffs.iter().map(|s| s.abs()).collect();
    let xi_scaling = closed_form_scale(
        &Potential::gaussian(1.0)?,
        &ones[..scal.len()],
        &abs[..scal.len()],
    )
    .unwrap_or(1.0);

    let mut hypers = Hypers::default_for(model, levels, nu)?;
    hypers.xi_scaling = xi_scaling;
    for l in 1..=levels {
        let range = layout.level_range(l);
        let (w, p) = (&ones[range.clone()], &abs[range]);
        let lap = closed_form_scale(&Potential::laplace(1.0)?, w, p).unwrap_or(1.0);
        let gauss = closed_form_scale(&Potential::gaussian(1.0)?, w, p).unwrap_or(1.0);
        let t = refit_scale(&Potential::student_t(1.0, nu)?, w, p);
        hypers.levels[l - 1] = match model {
            Model::LapFact => LevelPrior::Single(Potential::laplace(lap)?),
            Model::TFact => LevelPrior::Single(t),
            Model::LapTree => LevelPrior::Pair {
                low: Potential::laplace(clamp_hyper(4.0 * lap))?,
                high: Potential::laplace(clamp_hyper(0.5 * lap))?,
            },
            Model::TTree => LevelPrior::Pair {
                low: Potential::gaussian(clamp_hyper(4.0 * gauss))?,
                high: t,
            },
        };
    }

    let detail = layout.n_scaling()..layout.len();
    if !model.is_tree() {
        let ll = detail
            .clone()
            .map(|j| {
                -0.5 * hypers
                    .level(layout.coeff(j).level)
                    .state(0)
                    .neg2_log(coeffs[j])
            })
            .sum();
        return Ok(EmFit {
            hypers,
            log_likelihood: vec![ll],
        });
    }

    let topo = TreeTopology::from_layout(layout);
    let p = &abs[detail.clone()];
    let mut params = hypers.tree.take().expect("tree model");
    let mut log_likelihood = Vec::with_capacity(em_iters + 1);
    let mut q = vec![[0.0; 2]; p.len()];
    for iter in 0..=em_iters {
        let evidence: Vec<[f64; 2]> = (0..topo.len())
            .map(|k| {
                let prior = hypers.level(topo.level(k));
                [
                    -0.5 * prior.state(0).neg2_log(p[k]),
                    -0.5 * prior.state(1).neg2_log(p[k]),
                ]
            })
            .collect();
        let m = bp_infer(&topo, &params, &evidence).map_err(|e| e.at("initialization"))?;
        log_likelihood.push(m.log_z);
        if iter == em_iters {
            break;
        }
        for (qk, &q1) in q.iter_mut().zip(&m.q1) {
            *qk = [1.0 - q1, q1];
        }
        for l in 1..=levels {
            let range = layout.level_range(l);
            let (a, b) = (
                range.start - layout.n_scaling(),
                range.end - layout.n_scaling(),
            );
            for r in 0..2 {
                let w: Vec<f64> = q[a..b].iter().map(|q| q[r]).collect();
                let pot = *hypers.level(l).state(r);
                hypers.levels[l - 1].set_state(r, refit_scale(&pot, &w, &p[a..b]));
            }
        }
        params = update_theta(&topo, &m, &params);
    }
    hypers.tree = Some(params);
    Ok(EmFit {
        hypers,
        log_likelihood,
    })
}
